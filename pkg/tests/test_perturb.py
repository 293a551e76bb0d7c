import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from cct.model import Decoder
from cct.perturb import (DEFAULT_ROSTER, PerturbationKind, PerturbParams, apply_perturbation, con_msk,
                         cutout_mask, dropout_spatial, expand_roster, f_drop, f_noise, guided_cutout, i_vat,
                         obj_msk, object_context_masks, parse_roster, roster_to_json)
from helpers import fd_check


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def half_plane_logits(B=1, C=3, H=32, W=32, cls=1, col=16):
    logits = torch.zeros(B, C, H, W, dtype=torch.float64)
    logits[:, 0] = 1.0
    logits[:, cls, :, col:] = 2.0
    return logits


# -- roster ------------------------------------------------------------------------

def test_default_roster_has_thirty_decoders():
    kinds = expand_roster(DEFAULT_ROSTER)
    assert len(kinds) == 30
    counts = {k: kinds.count(k) for k in PerturbationKind}
    assert counts[PerturbationKind.OBJ_MSK] == 2 and counts[PerturbationKind.CON_MSK] == 2
    assert counts[PerturbationKind.I_VAT] == 2 and counts[PerturbationKind.F_NOISE] == 6


def test_roster_round_trip_and_errors():
    assert parse_roster(roster_to_json(DEFAULT_ROSTER)) == DEFAULT_ROSTER
    with pytest.raises(ValueError):
        parse_roster([{"kind": "BLUR", "count": 2}])
    with pytest.raises(ValueError):
        parse_roster([{"kind": "F_NOISE", "count": 0}])
    with pytest.raises(ValueError):
        parse_roster([{"kind": "F_NOISE", "count": 1, "p": 3}])
    with pytest.raises(ValueError):
        parse_roster([])


def test_params_validation():
    PerturbParams().validate()
    for bad in (dict(dropout_p=1.0), dict(cutout_area=0.0), dict(vat_eps=0.0), dict(vat_xi=-1.0)):
        with pytest.raises(ValueError):
            PerturbParams(**bad).validate()


# -- F-Noise -------------------------------------------------------------------------

def test_f_noise_zero_range_is_identity():
    z = torch.randn(2, 4, 3, 3)
    assert torch.equal(f_noise(z, gen(), (0.0, 0.0)), z)


def test_f_noise_arithmetic():
    z = torch.full((1, 1, 1, 1), 2.0, dtype=torch.float64)
    assert abs(f_noise(z, gen(), (0.3, 0.3)).item() - 2.6) < 1e-12


def test_f_noise_bound_and_batch_broadcast():
    g = gen(1)
    z = torch.randn(4, 8, 3, 3, dtype=torch.float64)
    worst = 0.0
    for _ in range(10 ** 4 // 36):
        out = f_noise(z, g)
        ratio = (out - z).abs() / z.abs()
        worst = max(worst, ratio.max().item())
        # one noise tensor for the whole batch
        assert torch.allclose(ratio[0], ratio[1], atol=1e-9)
    assert worst <= 0.3 + 1e-12


# -- F-Drop --------------------------------------------------------------------------

def uniform_saliency(B, h, w, seed):
    # one channel, so the saliency is z itself; evenly spread values in [0, 1]
    rng = np.random.default_rng(seed)
    vals = np.stack([rng.permutation(h * w) / (h * w - 1) for _ in range(B)]).reshape(B, 1, h, w)
    return torch.as_tensor(vals) + 1.0


def test_f_drop_masked_fraction_tracks_gamma():
    B, h, w = 64, 20, 20
    fracs, gammas = [], []
    for seed in range(8):
        z = uniform_saliency(B, h, w, seed)
        gamma = 0.6 + 0.3 * torch.rand((B, 1, 1), generator=gen(seed), dtype=z.dtype)
        out = f_drop(z, gen(seed))
        fracs.append(((out == 0).flatten(1).double().mean(1)).numpy())
        gammas.append(gamma.flatten().numpy())
    fracs, gammas = np.concatenate(fracs), np.concatenate(gammas)
    assert fracs.min() >= 0.08 and fracs.max() <= 0.42
    assert np.abs(fracs - (1 - gammas)).max() <= 0.02


def test_f_drop_always_masks_the_peak_and_keeps_constants():
    z = torch.rand(3, 4, 5, 5, dtype=torch.float64)
    out = f_drop(z, gen())
    sal = z.sum(1).flatten(1)
    peak = sal.argmax(1)
    for b in range(3):
        assert (out[b].flatten(1)[:, peak[b]] == 0).all()
    const = torch.ones(2, 4, 3, 3)
    assert torch.equal(f_drop(const, gen()), const)


# -- spatial dropout -----------------------------------------------------------------

def test_dropout_slices_and_expectation():
    z = torch.rand(2, 6, 3, 3, dtype=torch.float64) + 0.5
    g = gen(2)
    out = dropout_spatial(z, 0.5, g)
    for b in range(2):
        for c in range(6):
            s = out[b, c]
            assert torch.equal(s, torch.zeros_like(s)) or torch.allclose(s, 2 * z[b, c])
    total = torch.zeros_like(z)
    n = 10 ** 4
    for _ in range(n):
        total += dropout_spatial(z, 0.5, g)
    assert ((total / n - z).abs() / z).max() < 0.05
    with pytest.raises(ValueError):
        dropout_spatial(z, 0.0, g)


# -- guided masks ------------------------------------------------------------------

def test_masks_all_background():
    logits = torch.zeros(2, 3, 16, 16)
    logits[:, 0] = 1.0
    m_obj, m_con = object_context_masks(logits, (2, 2))
    assert torch.equal(m_obj, torch.ones_like(m_obj)) and torch.equal(m_con, torch.zeros_like(m_con))
    z = torch.randn(2, 4, 2, 2)
    assert torch.equal(obj_msk(z, logits), z)
    assert torch.equal(con_msk(z, logits), torch.zeros_like(z))


def test_masks_half_plane():
    logits = half_plane_logits(H=32, W=32, col=16)
    m_obj, m_con = object_context_masks(logits, (4, 4))
    expected = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    expected[..., 2:] = 1.0
    assert torch.equal(m_con, expected)
    assert torch.equal(m_obj + m_con, torch.ones_like(m_obj))


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 10 ** 6))
def test_obj_con_partition(seed):
    g = gen(seed)
    logits = torch.randn(2, 3, 16, 16, generator=g)
    z = torch.randn(2, 5, 2, 2, generator=g)
    assert torch.equal(obj_msk(z, logits) + con_msk(z, logits), z)
    assert torch.equal(obj_msk(z, logits), obj_msk(z, logits))


def test_cutout_no_foreground_is_identity():
    logits = torch.zeros(1, 3, 32, 32)
    logits[:, 0] = 1
    z = torch.randn(1, 4, 4, 4)
    assert torch.equal(guided_cutout(z, logits, gen()), z)


def brute_components(mask):
    """4-connected components by flood fill; independent of scipy."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for y in range(h):
        for x in range(w):
            if mask[y, x] and not seen[y, x]:
                stack, cells = [(y, x)], []
                seen[y, x] = True
                while stack:
                    cy, cx = stack.pop()
                    cells.append((cy, cx))
                    for ny, nx in ((cy + 1, cx), (cy - 1, cx), (cy, cx + 1), (cy, cx - 1)):
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
                comps.append(cells)
    return comps


@settings(deadline=None, max_examples=40)
@given(st.integers(0, 10 ** 6))
def test_cutout_stays_in_boxes_and_hits_area(seed):
    rng = np.random.default_rng(seed)
    h = w = 12
    labels = np.zeros((h, w), dtype=np.int64)
    for cls in (1, 2):
        y0, x0 = rng.integers(0, h - 3, size=2)
        labels[y0:y0 + rng.integers(2, 7), x0:x0 + rng.integers(2, 7)] = cls
    logits = F.one_hot(torch.as_tensor(labels), 3).permute(2, 0, 1)[None].double()
    keep = cutout_mask(logits, (h, w), gen(seed), area_frac=0.4)[0, 0].numpy()
    boxes = np.zeros((h, w), dtype=bool)
    for cls in (1, 2):
        for cells in brute_components(labels == cls):
            ys, xs = zip(*cells)
            if len(cells) < 4:
                continue
            y0, y1, x0, x1 = min(ys), max(ys) + 1, min(xs), max(xs) + 1
            boxes[y0:y1, x0:x1] = True
            bh, bw = y1 - y0, x1 - x0
            zeroed = (keep[y0:y1, x0:x1] == 0).sum()
            # one cell of rounding per side around the target area
            target = 0.4 * bh * bw
            slack = bh + bw + 1
            assert target - slack <= zeroed <= target + slack
    assert (keep[~boxes] == 1).all()


# -- I-VAT -----------------------------------------------------------------------------

def vat_setup(seed=0):
    torch.manual_seed(seed)
    dec = Decoder(8, 3).double()
    for p in dec.parameters():
        p.data.add_(0.5 * torch.randn_like(p))
    z = torch.randn(2, 8, 2, 2, dtype=torch.float64)
    return dec, z


def kl_per_sample(dec, z, z2):
    p = F.softmax(dec(z), 1)
    logq = F.log_softmax(dec(z2), 1)
    return (torch.xlogy(p, p) - p * logq).sum(1).mean((1, 2))


def test_vat_norm_equals_eps():
    dec, z = vat_setup()
    out = i_vat(z, dec, eps=2.0, xi=1e-6, generator=gen())
    norms = (out - z).flatten(1).norm(dim=1)
    assert torch.allclose(norms, torch.full_like(norms, 2.0), atol=1e-9)
    assert torch.equal(i_vat(z, dec, eps=0.0, generator=gen()), z)


def test_vat_does_not_touch_decoder():
    dec, z = vat_setup()
    before = {k: v.clone() for k, v in dec.state_dict().items()}
    i_vat(z, dec, generator=gen())
    assert all(torch.equal(before[k], v) for k, v in dec.state_dict().items())
    assert all(p.grad is None for p in dec.parameters())


def test_vat_beats_random_directions():
    dec, z = vat_setup(1)
    eps = 2.0
    with torch.no_grad():
        adv = kl_per_sample(dec, z, i_vat(z, dec, eps=eps, generator=gen()))
        g = gen(7)
        rand = []
        for _ in range(32):
            d = torch.randn(z.shape, generator=g, dtype=torch.float64)
            d = eps * d / d.flatten(1).norm(dim=1).view(-1, 1, 1, 1)
            rand.append(kl_per_sample(dec, z, z + d))
        median = torch.stack(rand).median(0).values
    assert (adv >= median).all()


def test_vat_flat_decoder_returns_input():
    dec = Decoder(8, 3).double()
    for p in dec.parameters():
        p.data.zero_()
    z = torch.randn(1, 8, 2, 2, dtype=torch.float64)
    assert torch.equal(i_vat(z, dec, generator=gen()), z)


# -- generic contracts ---------------------------------------------------------------

@pytest.mark.parametrize("kind", list(PerturbationKind))
def test_every_kind_keeps_shape_and_finiteness(kind):
    dec, _ = vat_setup()
    z = torch.randn(2, 8, 4, 4, dtype=torch.float64)
    logits = half_plane_logits(B=2, H=32, W=32)
    out = apply_perturbation(kind, z, gen(), PerturbParams(), pred_logits=logits, decoder=dec)
    assert out.shape == z.shape and torch.isfinite(out).all()
    if kind not in (PerturbationKind.I_VAT,):
        # multiplicative or masking: surviving activations keep their sign
        kept = out != 0
        assert (torch.sign(out[kept]) == torch.sign(z[kept])).all()


def test_guided_kinds_need_prediction():
    with pytest.raises(ValueError):
        apply_perturbation("OBJ_MSK", torch.zeros(1, 2, 2, 2), gen(), PerturbParams())
    with pytest.raises(ValueError):
        apply_perturbation("I_VAT", torch.zeros(1, 2, 2, 2), gen(), PerturbParams())


@pytest.mark.parametrize("kind", list(PerturbationKind))
def test_grad_through_perturbations(kind):
    """Masks and noise are constants of the backward pass; replaying the same rng keeps them fixed."""
    dec, _ = vat_setup()
    z = torch.randn(2, 8, 2, 2, dtype=torch.float64) + 0.1
    logits = half_plane_logits(B=2, H=16, W=16, col=8)
    w = torch.randn(2, 8, 2, 2, dtype=torch.float64)
    params = PerturbParams()
    if kind is PerturbationKind.I_VAT:
        # r_adv is computed on a detached copy, so the map is z -> z + const
        r = (apply_perturbation(kind, z, gen(), params, decoder=dec) - z).detach()
        fd_check(lambda a: ((a + r) * w).sum(), [z])
        g, = torch.autograd.grad((apply_perturbation(kind, z.requires_grad_(), gen(), params, decoder=dec) * w).sum(), z)
        assert torch.equal(g, w)
        return
    fd_check(lambda a: (apply_perturbation(kind, a, gen(3), params, pred_logits=logits, decoder=dec) * w).sum(), [z])

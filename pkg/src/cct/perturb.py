"""Perturbations applied to the encoder output before auxiliary decoding.

Stochastic perturbations draw from an explicit ``torch.Generator`` so every
auxiliary branch can own an independent, reproducible stream. Masks are built
from detached values; gradients flow only through the surviving activations.
"""
import enum
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage


class PerturbationKind(str, enum.Enum):
    F_NOISE = "F_NOISE"
    F_DROP = "F_DROP"
    DROPOUT = "DROPOUT"
    OBJ_MSK = "OBJ_MSK"
    CON_MSK = "CON_MSK"
    G_CUTOUT = "G_CUTOUT"
    I_VAT = "I_VAT"


GUIDED = {PerturbationKind.OBJ_MSK, PerturbationKind.CON_MSK, PerturbationKind.G_CUTOUT}


@dataclass
class PerturbParams:
    noise_range: Tuple[float, float] = (-0.3, 0.3)
    drop_gamma_range: Tuple[float, float] = (0.6, 0.9)
    dropout_p: float = 0.5
    cutout_area: float = 0.4
    vat_eps: float = 2.0
    vat_xi: float = 1e-6
    background_class: int = 0

    def validate(self):
        if not 0.0 < self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in (0, 1)")
        if not 0.0 < self.cutout_area < 1.0:
            raise ValueError("cutout_area must lie in (0, 1)")
        if self.vat_eps <= 0 or self.vat_xi <= 0:
            raise ValueError("vat_eps and vat_xi must be positive")


DEFAULT_ROSTER = [
    (PerturbationKind.F_NOISE, 6),
    (PerturbationKind.F_DROP, 6),
    (PerturbationKind.DROPOUT, 6),
    (PerturbationKind.G_CUTOUT, 6),
    (PerturbationKind.OBJ_MSK, 2),
    (PerturbationKind.CON_MSK, 2),
    (PerturbationKind.I_VAT, 2),
]


def parse_roster(items) -> List[Tuple[PerturbationKind, int]]:
    """Parse ``[{"kind": "F_NOISE", "count": 6}, ...]`` into (kind, count) pairs."""
    roster = []
    for item in items:
        if isinstance(item, dict):
            unknown = set(item) - {"kind", "count"}
            if unknown:
                raise ValueError(f"unknown roster keys: {sorted(unknown)}")
            kind, count = item["kind"], item["count"]
        else:
            kind, count = item
        kind = PerturbationKind(kind)
        if int(count) < 1:
            raise ValueError(f"roster count for {kind.value} must be >= 1")
        roster.append((kind, int(count)))
    if not roster:
        raise ValueError("roster must contain at least one auxiliary decoder")
    return roster


def roster_to_json(roster):
    return [{"kind": PerturbationKind(k).value, "count": int(c)} for k, c in roster]


def expand_roster(roster) -> List[PerturbationKind]:
    return [PerturbationKind(kind) for kind, count in roster for _ in range(count)]


def _uniform(shape, low, high, generator, like):
    u = torch.rand(shape, generator=generator, dtype=like.dtype)
    return (low + (high - low) * u).to(like.device)


def f_noise(z, generator, noise_range=(-0.3, 0.3)):
    # one noise tensor broadcast over the batch
    noise = _uniform((1,) + tuple(z.shape[1:]), *noise_range, generator, z)
    return z * noise + z


def f_drop(z, generator, gamma_range=(0.6, 0.9)):
    b = z.shape[0]
    gamma = _uniform((b, 1, 1), *gamma_range, generator, z)
    sal = z.detach().sum(1)
    lo = sal.flatten(1).min(1).values.view(b, 1, 1)
    hi = sal.flatten(1).max(1).values.view(b, 1, 1)
    span = hi - lo
    norm = torch.where(span > 0, (sal - lo) / torch.where(span > 0, span, torch.ones_like(span)),
                       torch.zeros_like(sal))
    mask = (norm < gamma).to(z.dtype).unsqueeze(1)
    return z * mask


def dropout_spatial(z, p, generator):
    if not 0.0 < p < 1.0:
        raise ValueError("dropout probability must lie in (0, 1)")
    keep = (torch.rand(z.shape[:2] + (1, 1), generator=generator, dtype=z.dtype) >= p).to(z)
    return z * keep / (1.0 - p)


def _foreground_at(pred_logits, size, background_class=0):
    # nearest resampling picks pixels, so it commutes with the per-pixel argmax
    picked = F.interpolate(pred_logits.detach(), size=tuple(size), mode="nearest")
    labels = picked.argmax(1, keepdim=True)
    return labels, labels != background_class


def object_context_masks(pred_logits, feat_size, background_class=0):
    """Binary (B, 1, h, w) masks: M_obj zeroes predicted objects, M_con = 1 - M_obj."""
    _, fg = _foreground_at(pred_logits, feat_size, background_class)
    fg = fg.to(pred_logits.dtype)
    return 1.0 - fg, fg


def obj_msk(z, pred_logits, background_class=0):
    m_obj, _ = object_context_masks(pred_logits, z.shape[2:], background_class)
    return z * m_obj.to(z)


def con_msk(z, pred_logits, background_class=0):
    _, m_con = object_context_masks(pred_logits, z.shape[2:], background_class)
    return z * m_con.to(z)


def _cutout_rect(bh, bw, area_frac, generator):
    target = area_frac * bh * bw
    aspect = 0.5 + 1.5 * torch.rand((), generator=generator, dtype=torch.float64).item()
    rh = min(float(bh), math.sqrt(target / aspect))
    rw = min(float(bw), target / rh)
    rh = min(float(bh), target / rw)
    rh = max(1, min(bh, int(round(rh))))
    rw = max(1, min(bw, int(round(rw))))
    oy = int(torch.randint(0, bh - rh + 1, (), generator=generator))
    ox = int(torch.randint(0, bw - rw + 1, (), generator=generator))
    return oy, ox, rh, rw


def cutout_mask(pred_logits, feat_size, generator, area_frac=0.4, background_class=0, min_area=4):
    """Keep-mask (B, 1, h, w) zeroing one random rectangle inside each predicted object's bbox."""
    labels, _ = _foreground_at(pred_logits, feat_size, background_class)
    labels = labels[:, 0].cpu().numpy()
    keep = np.ones((labels.shape[0], 1) + tuple(feat_size), dtype=np.float64)
    for b in range(labels.shape[0]):
        for cls in np.unique(labels[b]):
            if cls == background_class:
                continue
            # default structuring element is 4-connectivity
            comps, _ = ndimage.label(labels[b] == cls)
            for comp_id, sl in enumerate(ndimage.find_objects(comps), start=1):
                if (comps[sl] == comp_id).sum() < min_area:
                    continue
                y0, x0 = sl[0].start, sl[1].start
                bh, bw = sl[0].stop - y0, sl[1].stop - x0
                oy, ox, rh, rw = _cutout_rect(bh, bw, area_frac, generator)
                keep[b, 0, y0 + oy:y0 + oy + rh, x0 + ox:x0 + ox + rw] = 0.0
    return torch.from_numpy(keep)


def guided_cutout(z, pred_logits, generator, area_frac=0.4, background_class=0):
    keep = cutout_mask(pred_logits, z.shape[2:], generator, area_frac, background_class)
    return z * keep.to(z)


def _kl_map_mean(p, logq):
    return (torch.xlogy(p, p) - p * logq).sum(1).mean()


def i_vat(z, decoder, eps=2.0, xi=1e-6, generator=None):
    """One power-iteration step of virtual adversarial noise on the feature map.

    The adversarial direction is computed in float64 on a detached copy of
    ``z`` and of the decoder parameters, so neither receives gradient here.
    ``eps`` is the L2 norm of the perturbation per sample.
    """
    if eps == 0:
        return z
    zd = z.detach().double()
    params = {k: v.detach().double() for k, v in decoder.named_parameters()}
    dim = zd[0].numel()
    r = torch.randn(zd.shape, generator=generator, dtype=torch.float64) * (xi / math.sqrt(dim))
    with torch.enable_grad():
        r.requires_grad_(True)
        target = F.softmax(torch.func.functional_call(decoder, params, (zd,)), dim=1).detach()
        logq = F.log_softmax(torch.func.functional_call(decoder, params, (zd + r,)), dim=1)
        grad = torch.autograd.grad(_kl_map_mean(target, logq), r)[0]
    norms = grad.flatten(1).norm(dim=1).view(-1, *([1] * (grad.dim() - 1)))
    safe = torch.where(norms > 0, norms, torch.ones_like(norms))
    r_adv = torch.where(norms > 0, eps * grad / safe, torch.zeros_like(grad))
    return z + r_adv.to(z)


def apply_perturbation(kind, z, generator, params: PerturbParams, pred_logits=None, decoder=None):
    kind = PerturbationKind(kind)
    if kind in GUIDED and pred_logits is None:
        raise ValueError(f"{kind.value} needs the main prediction")
    if kind is PerturbationKind.F_NOISE:
        return f_noise(z, generator, params.noise_range)
    if kind is PerturbationKind.F_DROP:
        return f_drop(z, generator, params.drop_gamma_range)
    if kind is PerturbationKind.DROPOUT:
        return dropout_spatial(z, params.dropout_p, generator)
    if kind is PerturbationKind.OBJ_MSK:
        return obj_msk(z, pred_logits, params.background_class)
    if kind is PerturbationKind.CON_MSK:
        return con_msk(z, pred_logits, params.background_class)
    if kind is PerturbationKind.G_CUTOUT:
        return guided_cutout(z, pred_logits, generator, params.cutout_area, params.background_class)
    if decoder is None:
        raise ValueError("I_VAT needs its auxiliary decoder")
    return i_vat(z, decoder, params.vat_eps, params.vat_xi, generator)

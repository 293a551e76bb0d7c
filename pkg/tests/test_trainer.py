import copy
import csv

import numpy as np
import pytest
import torch

from cct.datasynth import ConfigError, Cycle, read_manifest, sample_iteration
from cct.trainer import (METRIC_COLUMNS, DomainData, DomainSpec, TrainConfig, audit_stop_gradient,
                         compute_losses, init_state, main_decoder_params, make_batch, multidomain_batch,
                         train, train_multidomain, train_step)

SMALL_ROSTER = [{"kind": k, "count": 1} for k in
                ("F_NOISE", "F_DROP", "DROPOUT", "G_CUTOUT", "OBJ_MSK", "CON_MSK", "I_VAT")]


def small_config(**overrides):
    base = dict(epochs=1, batch=4, depth=16, roster=SMALL_ROSTER, seed=0)
    base.update(overrides)
    return TrainConfig.from_dict(base)


def first_batch(data, config, seed=0, weak=False):
    rng = np.random.default_rng(seed)
    mixed = sample_iteration(Cycle(len(data.lab_x), rng), Cycle(len(data.unl_x), rng), config.batch)
    return make_batch(data, mixed, np.random.default_rng(seed), use_augment=False, weak=weak)


@pytest.fixture(scope="module")
def data(tiny_data):
    return DomainData(read_manifest(tiny_data))


# -- configuration ------------------------------------------------------------------

def test_unknown_config_keys_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="loss.lamda_u"):
        TrainConfig.from_dict({"loss": {"lamda_u": 1}})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"mode": "mean_teacher"})


def test_config_round_trip(tmp_path):
    cfg = small_config(mode="cct_weak")
    path = tmp_path / "c.json"
    import json
    path.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_json(path).to_dict() == cfg.to_dict()


def test_default_roster_has_30_decoders():
    assert len(TrainConfig().kinds) == 30


# -- single steps -------------------------------------------------------------------

def test_stop_gradient_on_live_step(data):
    cfg = small_config()
    state = init_state(cfg, data.num_classes, total_iters=100)
    state.step = 50  # omega_u well above zero
    total, terms, sched = compute_losses(state, first_batch(data, cfg), cfg)
    assert sched["omega_u"] > 1.0 and terms["loss_u"].item() > 0
    weighted = sched["omega_u"] * terms["loss_u"]
    grads = torch.autograd.grad(weighted, list(main_decoder_params(state.model).values()),
                                retain_graph=True, allow_unused=True)
    assert all(g is None or torch.count_nonzero(g) == 0 for g in grads)
    assert audit_stop_gradient(weighted, state.model) == 0.0
    # the consistency term does reach the encoder and the auxiliary decoders
    enc = torch.autograd.grad(weighted, list(state.model.encoder.parameters()), retain_graph=True)
    assert any(torch.count_nonzero(g) > 0 for g in enc)


def test_aux_decoders_get_no_supervised_gradient(data):
    cfg = small_config()
    state = init_state(cfg, data.num_classes, total_iters=100)
    _, terms, _ = compute_losses(state, first_batch(data, cfg), cfg)
    grads = torch.autograd.grad(terms["loss_s"], list(state.model.heads[0].aux.parameters()),
                                allow_unused=True)
    assert all(g is None for g in grads)


def _grads(model, loss):
    model.zero_grad(set_to_none=True)
    loss.backward()
    return {n: p.grad.clone() for n, p in model.named_parameters() if p.grad is not None}


def test_zero_omega_matches_baseline_gradients(data):
    cfg = small_config(use_abce=False)
    base_cfg = small_config(use_abce=False, mode="supervised_baseline")
    state = init_state(cfg, data.num_classes, total_iters=100)
    state.model.double()
    batch = first_batch(data, cfg)
    batch.x_l, batch.x_u = batch.x_l.double(), batch.x_u.double()
    sched = {"lr": 0.01, "eta": 1.0, "omega_u": 0.0, "omega_w": 0.0}
    g_cct = _grads(state.model, compute_losses(state, batch, cfg, sched=sched)[0])
    g_base = _grads(state.model, compute_losses(state, batch, base_cfg, sched=sched)[0])
    for name, g in g_base.items():
        torch.testing.assert_close(g_cct[name], g, rtol=1e-10, atol=1e-12)
    # only the zero-weighted consistency graph touches the auxiliary decoders
    assert all(torch.count_nonzero(g) == 0 for n, g in g_cct.items() if n not in g_base)


def test_logged_total_matches_parts(data):
    cfg = small_config(loss={"pairwise_subset": 3})
    state = init_state(cfg, data.num_classes, total_iters=10)
    state.step = 3
    m = train_step(state, first_batch(data, cfg), cfg)
    recomputed = m["loss_s"] + m["omega_u"] * m["loss_u"] + m["loss_pw"]
    assert abs(m["loss_total"] - recomputed) < 1e-10
    assert abs(m["loss_total"] - m["loss_total_graph"]) < 1e-4 * max(1.0, abs(m["loss_total"]))
    assert m["loss_pw"] > 0


# -- runs ---------------------------------------------------------------------------

def _read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_metrics_csv_and_checkpoints(tiny_data, data, tmp_path):
    cfg = small_config(epochs=2, log_every=1)
    result = train(cfg, None, tmp_path, data=data)
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == ",".join(METRIC_COLUMNS)
    rows = _read_csv(tmp_path / "metrics.csv")
    assert len(rows) == 2 * 2  # 8 unlabeled / batch 4 = 2 steps per epoch
    for row in rows:
        total = float(row["loss_s"]) + float(row["omega_u"]) * float(row["loss_u"])
        assert abs(float(row["loss_total"]) - total) < 1e-10
    assert rows[-1]["miou_val"] != ""
    assert (tmp_path / "best" / "meta.json").exists() or any((tmp_path / "best").iterdir())
    assert any((tmp_path / "final").iterdir())
    assert 0.0 <= result["final_miou"] <= 1.0


def test_baseline_logs_zero_consistency(data, tmp_path):
    cfg = small_config(mode="supervised_baseline", log_every=1)
    train(cfg, None, tmp_path, data=data)
    rows = _read_csv(tmp_path / "metrics.csv")
    assert rows and all(float(r["loss_u"]) == 0.0 and float(r["omega_u"]) == 0.0 for r in rows)


def test_zero_epochs_writes_initial_checkpoint_only(data, tmp_path):
    result = train(small_config(epochs=0), None, tmp_path, data=data)
    assert result["rows"] == []
    assert _read_csv(tmp_path / "metrics.csv") == []
    assert any((tmp_path / "final").iterdir())
    assert not (tmp_path / "best").exists()


def test_runs_are_deterministic(data, tmp_path):
    cfg = small_config(epochs=1, log_every=1)
    a = train(cfg, None, tmp_path / "a", data=data)
    b = train(cfg, None, tmp_path / "b", data=data)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    for p, q in zip(a["state"].model.parameters(), b["state"].model.parameters()):
        assert torch.equal(p, q)


def test_weak_mode_trains_on_pseudo_labels(tiny_weak_data, tmp_path):
    cfg = small_config(mode="cct_weak", pretrain_epochs=2, log_every=1, schedule={"rampup_frac_w": 0.01})
    manifest = read_manifest(tiny_weak_data)
    result = train(cfg, manifest, tmp_path)
    rows = _read_csv(tmp_path / "metrics.csv")
    # 8 unlabeled + 6 weak images at batch 4 -> 4 steps
    assert len(rows) == 4
    assert any(float(r["loss_w"]) > 0 for r in rows)
    assert result["num_aux"] == len(SMALL_ROSTER)


def test_weak_mode_needs_weak_split(data, tmp_path):
    with pytest.raises(ConfigError):
        train(small_config(mode="cct_weak"), None, tmp_path, data=data)


# -- multi-domain -------------------------------------------------------------------

@pytest.fixture(scope="module")
def two_domains(tiny_data, tmp_path_factory):
    from cct.datasynth import generate_dataset
    from helpers import tiny_spec
    root = tmp_path_factory.mktemp("dom2")
    generate_dataset(tiny_spec(shape_kinds=["disk", "triangle"], seed=11), root)
    return [DomainSpec("d1", read_manifest(tiny_data)), DomainSpec("d2", read_manifest(root))]


def _snapshot(module):
    return {n: p.detach().clone() for n, p in module.named_parameters()}


def test_domain1_step_leaves_domain2_untouched(two_domains):
    cfg = small_config(mode="cct_multidomain", with_discriminator=True)
    datas = [s.load() for s in two_domains]
    state = init_state(cfg, [d.num_classes for d in datas], total_iters=20)
    state.step = 10
    cycles = [(Cycle(len(d.lab_x), np.random.default_rng(i)), Cycle(len(d.unl_x), np.random.default_rng(i)),
               Cycle(len(d.unl_x), np.random.default_rng(i + 5))) for i, d in enumerate(datas)]
    before_head2 = _snapshot(state.model.heads[1])
    before_enc = _snapshot(state.model.encoder)
    before_head1 = _snapshot(state.model.heads[0])
    batch = multidomain_batch(datas, cycles, 0, cfg, np.random.default_rng(0))
    assert batch.x_other is not None
    m = train_step(state, batch, cfg, domain=0)
    assert m["loss_adv"] > 0
    for n, p in state.model.heads[1].named_parameters():
        assert torch.equal(p, before_head2[n]), n
    assert any(not torch.equal(p, before_enc[n]) for n, p in state.model.encoder.named_parameters())
    assert any(not torch.equal(p, before_head1[n]) for n, p in state.model.heads[0].named_parameters())


def test_adversarial_gradient_flips_under_reversal(two_domains):
    datas = [s.load() for s in two_domains]
    grads = {}
    for lam in (1.0, -1.0):
        cfg = small_config(mode="cct_multidomain", with_discriminator=True, lambda_rev=lam)
        state = init_state(cfg, [d.num_classes for d in datas], total_iters=20)
        cycles = [(Cycle(len(d.lab_x), np.random.default_rng(i)), Cycle(len(d.unl_x), np.random.default_rng(i)),
                   Cycle(len(d.unl_x), np.random.default_rng(i + 5))) for i, d in enumerate(datas)]
        batch = multidomain_batch(datas, cycles, 0, cfg, np.random.default_rng(0))
        _, terms, _ = compute_losses(state, batch, cfg, domain=0)
        weighted = cfg.loss.lambda_adv * terms["loss_adv"]
        grads[lam] = torch.autograd.grad(weighted, list(state.model.encoder.parameters()), retain_graph=True)
        disc = torch.autograd.grad(weighted, list(state.model.discriminator.parameters()), allow_unused=True)
        grads[lam, "disc"] = disc
    for g_rev, g_plain in zip(grads[1.0], grads[-1.0]):
        assert torch.count_nonzero(g_rev) == 0 or torch.allclose(g_rev, -g_plain, rtol=1e-5, atol=1e-9)
    assert any(torch.count_nonzero(g) > 0 for g in grads[1.0])
    # the discriminator itself is trained the same way either way
    for a, b in zip(grads[1.0, "disc"], grads[-1.0, "disc"]):
        torch.testing.assert_close(a, b)


def test_no_adversary_decomposes_into_single_domain_steps(two_domains):
    cfg = small_config(mode="cct_multidomain", use_abce=False)
    single_cfg = small_config(mode="cct", use_abce=False)
    datas = [s.load() for s in two_domains]
    multi = init_state(cfg, [d.num_classes for d in datas], total_iters=20)
    for dom in (0, 1):
        single = init_state(single_cfg, datas[dom].num_classes, total_iters=20)
        single.model.encoder.load_state_dict(multi.model.encoder.state_dict())
        single.model.heads[0].load_state_dict(multi.model.heads[dom].state_dict())
        # same perturbation streams for this domain's branches
        k = len(single_cfg.kinds)
        for g_single, g_multi in zip(single.aux_generators, multi.aux_generators[dom * k:(dom + 1) * k]):
            g_single.set_state(g_multi.get_state())
        batch = first_batch(datas[dom], cfg, seed=dom)
        sched = {"lr": 0.01, "eta": 1.0, "omega_u": 5.0, "omega_w": 0.0}
        g_multi = _grads(multi.model, compute_losses(multi, batch, cfg, domain=dom, sched=sched)[0])
        g_single = _grads(single.model, compute_losses(single, batch, single_cfg, sched=sched)[0])
        for name, g in g_single.items():
            mapped = name.replace("heads.0.", f"heads.{dom}.")
            torch.testing.assert_close(g_multi[mapped], g, rtol=1e-5, atol=1e-7)
        assert not any(n.startswith(f"heads.{1 - dom}.") for n in g_multi)


def test_multidomain_run(two_domains, tmp_path):
    cfg = small_config(mode="cct_multidomain", log_every=1)
    result = train_multidomain(cfg, two_domains, tmp_path)
    rows = _read_csv(tmp_path / "metrics.csv")
    assert len(rows) == 2 * 2  # two domains, two steps each
    assert result["state"].model.domain_classes == [4, 3]
    with pytest.raises(ConfigError):
        train_multidomain(cfg, two_domains[:1], tmp_path)

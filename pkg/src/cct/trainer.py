"""Cross-consistency training loop, configuration and multi-domain alternation.

One step: labeled images go through the encoder and main decoder for the
supervised loss; the encoder output of the unlabeled images is perturbed once
per auxiliary decoder and each auxiliary prediction is pulled towards the
detached main prediction. The main decoder only ever sees the supervised loss.
"""
import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .checkpoint import save_checkpoint
from .datasynth import (IGNORE, ConfigError, Cycle, Manifest, augment, load_example, load_label,
                        sample_iteration)
from .evaluate import evaluate_arrays
from .model import CCTNet
from .optim import OptimizerConfig, sgd_update
from .perturb import (DEFAULT_ROSTER, PerturbationKind, PerturbParams, apply_perturbation,
                      expand_roster, parse_roster, roster_to_json)
from .schedules import ScheduleConfig, poly_lr, ramp_exp, ramp_log_threshold
from .weaklabels import PseudoLabelConfig, compute_cam, pretrain_classifier, pseudo_labels

log = logging.getLogger(__name__)

MODES = ("supervised_baseline", "cct", "cct_weak", "cct_multidomain")
METRIC_COLUMNS = ["step", "epoch", "lr", "eta", "omega_u", "loss_total", "loss_s", "loss_u",
                  "loss_w", "loss_pw", "loss_adv", "miou_val"]
DIVERGENCE_LIMIT = 1e4


class TrainingDiverged(RuntimeError):
    pass


class StopGradientViolation(AssertionError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch: int = 8
    mode: str = "cct"
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: L.LossWeights = field(default_factory=L.LossWeights)
    perturb: PerturbParams = field(default_factory=PerturbParams)
    roster: list = field(default_factory=lambda: roster_to_json(DEFAULT_ROSTER))
    use_abce: bool = True
    depth: int = 64
    augment: bool = True
    with_discriminator: bool = False
    lambda_rev: float = 1.0
    pretrain_epochs: int = 15
    pseudo: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    log_every: int = 0
    audit_every: int = 0
    eval_every: int = 1

    _NESTED = {"optimizer": OptimizerConfig, "schedule": ScheduleConfig, "loss": L.LossWeights,
               "perturb": PerturbParams, "pseudo": PseudoLabelConfig}

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        try:
            self.schedule.validate()
            self.loss.validate()
            self.perturb.validate()
            self.pseudo.validate()
            parse_roster(self.roster)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    @property
    def kinds(self) -> List[PerturbationKind]:
        return expand_roster(parse_roster(self.roster))

    @classmethod
    def from_dict(cls, d):
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - fields)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kwargs = {}
        for key, value in d.items():
            sub = cls._NESTED.get(key)
            if sub is not None:
                sub_fields = {f.name for f in dataclasses.fields(sub)}
                bad = sorted(set(value) - sub_fields)
                if bad:
                    raise ConfigError(f"unknown config keys: {[f'{key}.{b}' for b in bad]}")
                if key == "perturb":
                    value = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
                value = sub(**value)
            kwargs[key] = value
        return cls(**kwargs).validate()

    @classmethod
    def from_json(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self):
        return dataclasses.asdict(self)


# -- data ----------------------------------------------------------------------

class DomainData:
    """In-memory copy of one domain's splits."""

    def __init__(self, manifest: Manifest, domain=0, include_weak=False):
        root = manifest.root
        self.name = manifest.domains[domain]["name"]
        self.num_classes = manifest.num_classes(domain)

        def load(split):
            imgs, labels, levels, entries = [], [], [], manifest.entries(split, domain)
            for entry in entries:
                img, label, level = load_example(entry, root)
                imgs.append(img)
                labels.append(label)
                levels.append(level)
            return entries, imgs, labels, levels

        _, self.lab_x, self.lab_y, _ = load("labeled")
        _, self.val_x, self.val_y, _ = load("val")
        _, unl_x, _, _ = load("unlabeled")
        self.unl_x = list(unl_x)
        self.unl_pseudo = [None] * len(unl_x)
        self.weak_entries, self.weak_x, _, self.weak_level = load("weak")
        if include_weak:
            self.unl_x += self.weak_x
            pseudo = []
            for entry in self.weak_entries:
                path = entry.get("pseudo_label")
                pseudo.append(load_label(root / path) if path else None)
            self.unl_pseudo += pseudo
        if not self.lab_x:
            raise ConfigError(f"domain {self.name!r} has no labeled examples")
        if not self.unl_x:
            raise ConfigError(f"domain {self.name!r} has no unlabeled examples")

    @property
    def has_pseudo(self):
        return any(p is not None for p in self.unl_pseudo)


@dataclass
class StepBatch:
    x_l: torch.Tensor
    y_l: torch.Tensor
    x_u: Optional[torch.Tensor] = None
    pseudo: Optional[torch.Tensor] = None
    x_other: Optional[torch.Tensor] = None


def make_batch(data: DomainData, mixed, rng, use_augment=True, weak=False, dtype=torch.float32):
    xs, ys, us, ps = [], [], [], []
    for i in mixed.labeled:
        img, lbl = data.lab_x[i], data.lab_y[i]
        if use_augment:
            img, lbl = augment(img, lbl, rng)
        xs.append(img)
        ys.append(lbl)
    for i in mixed.unlabeled:
        img, pl = data.unl_x[i], data.unl_pseudo[i]
        if pl is None and weak:
            pl = np.full(img.shape[1:], IGNORE, dtype=np.uint8)
        if use_augment:
            img, pl = augment(img, pl, rng)
        us.append(img)
        ps.append(pl)
    batch = StepBatch(torch.as_tensor(np.stack(xs), dtype=dtype),
                      torch.as_tensor(np.stack(ys).astype(np.int64)),
                      torch.as_tensor(np.stack(us), dtype=dtype))
    if weak:
        batch.pseudo = torch.as_tensor(np.stack(ps).astype(np.int64))
    return batch


# -- state -----------------------------------------------------------------------

def _spawn_generators(seed, n):
    seeds = np.random.SeedSequence([seed, 17]).generate_state(max(n, 1))
    gens = []
    for s in seeds[:n]:
        g = torch.Generator()
        g.manual_seed(int(s))
        gens.append(g)
    return gens


@dataclass
class TrainState:
    model: CCTNet
    total_iters: int
    step: int = 0
    buffers: dict = field(default_factory=dict)
    aux_generators: list = field(default_factory=list)
    pair_rng: Optional[np.random.Generator] = None
    log: list = field(default_factory=list)


def init_state(config: TrainConfig, num_classes, total_iters, model=None):
    """Build the network and per-branch random streams for a run."""
    torch.manual_seed(config.seed)
    kinds = config.kinds if config.mode != "supervised_baseline" else []
    if model is None:
        with_disc = config.mode == "cct_multidomain" and config.with_discriminator
        model = CCTNet(num_classes, num_aux=len(kinds), depth=config.depth, with_discriminator=with_disc)
    n_domains = len(model.domain_classes)
    return TrainState(model=model, total_iters=max(1, total_iters),
                      aux_generators=_spawn_generators(config.seed, n_domains * len(kinds)),
                      pair_rng=np.random.default_rng([config.seed, 23]))


def schedule_values(config: TrainConfig, step, total_iters, num_classes):
    sc = config.schedule
    T = max(1, total_iters)
    omega_u = 0.0
    omega_w = 0.0
    if config.mode != "supervised_baseline":
        omega_u = ramp_exp(step, sc.rampup_frac_u * T, config.loss.lambda_u)
    if config.mode == "cct_weak":
        omega_w = ramp_exp(step, sc.rampup_frac_w * T, config.loss.lambda_w)
    return {
        "lr": poly_lr(min(step, T), T, config.optimizer.lr, sc.power),
        "eta": ramp_log_threshold(step, sc.rampup_frac_abce * T, sc.abce_final, num_classes),
        "omega_u": omega_u,
        "omega_w": omega_w,
    }


def main_decoder_params(model, domain=0):
    return dict(model.heads[domain].main.named_parameters())


def audit_stop_gradient(weighted_unsup, model, domain=0):
    """Gradient of the weighted consistency term w.r.t. every main-decoder parameter.

    Returns the largest absolute entry; anything but 0 raises.
    """
    params = main_decoder_params(model, domain)
    grads = torch.autograd.grad(weighted_unsup, list(params.values()), retain_graph=True,
                                allow_unused=True)
    worst = 0.0
    for name, g in zip(params, grads):
        if g is not None:
            worst = max(worst, g.abs().max().item())
    if worst != 0.0:
        raise StopGradientViolation(f"consistency loss leaks into the main decoder (max |grad| {worst})")
    return worst


def compute_losses(state: TrainState, batch: StepBatch, config: TrainConfig, domain=0, sched=None):
    """Forward pass for one step; returns (total tensor, dict of loss tensors, schedule values)."""
    model = state.model
    num_classes = model.domain_classes[domain]
    if sched is None:
        sched = schedule_values(config, state.step, state.total_iters, num_classes)
    kinds = config.kinds if config.mode != "supervised_baseline" else []
    n_l = batch.x_l.shape[0]
    use_unlabeled = bool(kinds) and batch.x_u is not None
    x = torch.cat([batch.x_l, batch.x_u]) if use_unlabeled else batch.x_l
    z = model.encode(x)
    z_l = z[:n_l]
    logits_l = model.decode(z_l, domain)
    if config.use_abce:
        loss_s = L.ab_ce(logits_l, batch.y_l, sched["eta"])
    else:
        loss_s = L.cross_entropy(logits_l, batch.y_l)

    terms = {"loss_s": loss_s}
    if use_unlabeled:
        z_u = z[n_l:]
        with torch.no_grad():
            main_u = model.decode(z_u.detach(), domain)
            main_probs = F.softmax(main_u, dim=1)
        head = model.heads[domain]
        gens = state.aux_generators[domain * len(kinds):(domain + 1) * len(kinds)]
        perturbed = [apply_perturbation(kind, z_u, gens[k], config.perturb, pred_logits=main_u,
                                        decoder=head.aux[k]) for k, kind in enumerate(kinds)]
        aux_logits = model.decode_aux(perturbed, domain)
        aux_probs = F.softmax(aux_logits, dim=2)
        terms["loss_u"] = L.consistency_loss(main_probs, aux_probs, config.loss)
        if config.mode == "cct_weak" and batch.pseudo is not None:
            terms["loss_w"] = L.weak_loss(batch.pseudo, aux_logits)
        subset = config.loss.pairwise_subset
        if subset is not None and len(aux_probs) >= 2:
            pick = state.pair_rng.choice(len(aux_probs), size=min(subset, len(aux_probs)), replace=False)
            terms["loss_pw"] = L.pairwise_loss(aux_probs[torch.as_tensor(sorted(pick))])
    if batch.x_other is not None and model.discriminator is not None and config.loss.lambda_adv > 0:
        z_other = model.encode(batch.x_other)
        z_here = z[n_l:] if use_unlabeled else z_l
        d_here = model.discriminate(z_here, config.lambda_rev)
        d_other = model.discriminate(z_other, config.lambda_rev)
        if domain == 0:
            terms["loss_adv"] = L.adversarial_loss(d_here, d_other)
        else:
            terms["loss_adv"] = L.adversarial_loss(d_other, d_here)
    total = L.total_loss(terms["loss_s"], terms.get("loss_u"), terms.get("loss_w"), terms.get("loss_pw"),
                         terms.get("loss_adv"), sched["omega_u"], sched["omega_w"], config.loss)
    return total, terms, sched


def train_step(state: TrainState, batch: StepBatch, config: TrainConfig, domain=0):
    """One optimisation step; returns a dict of logged scalars."""
    model = state.model
    model.train()
    total, terms, sched = compute_losses(state, batch, config, domain)
    if not torch.isfinite(total) or total.item() > DIVERGENCE_LIMIT:
        raise TrainingDiverged(f"total loss {total.item()} at step {state.step}")
    if config.audit_every and "loss_u" in terms and state.step % config.audit_every == 0:
        audit_stop_gradient(sched["omega_u"] * terms["loss_u"], model, domain)
    model.zero_grad(set_to_none=True)
    total.backward()
    params = dict(model.named_parameters())
    grads = {name: p.grad for name, p in params.items()}
    sgd_update(params, grads, state.buffers, sched["lr"], config.optimizer.momentum,
               config.optimizer.weight_decay)

    metrics = {"step": state.step, "lr": sched["lr"], "eta": sched["eta"], "omega_u": sched["omega_u"]}
    for key in ("loss_s", "loss_u", "loss_w", "loss_pw", "loss_adv"):
        metrics[key] = float(terms[key].item()) if key in terms else 0.0
    # logged total is the weighted sum of the logged parts, in float64
    metrics["loss_total"] = (metrics["loss_s"] + sched["omega_u"] * metrics["loss_u"]
                             + sched["omega_w"] * metrics["loss_w"] + metrics["loss_pw"]
                             + config.loss.lambda_adv * metrics["loss_adv"])
    metrics["loss_total_graph"] = float(total.item())
    state.step += 1
    return metrics


# -- runs --------------------------------------------------------------------------

def _write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _val_miou(model, data: DomainData, domain=0):
    if not data.val_x:
        return float("nan")
    report = evaluate_arrays(model, data.val_x, data.val_y, data.num_classes, domain=domain)
    return report["miou"]


def prepare_weak(config: TrainConfig, data: DomainData, model: CCTNet):
    """Pretrain the classification branch on the weak split and pseudo-label it in memory."""
    if not data.weak_x:
        raise ConfigError("cct_weak needs a weak split")
    if data.has_pseudo:
        return
    pretrain_classifier(model, data.weak_x, data.weak_level, epochs=config.pretrain_epochs,
                        batch=config.batch, opt=config.optimizer, seed=config.seed)
    model.eval()
    offset = len(data.unl_x) - len(data.weak_x)
    for i, (img, level) in enumerate(zip(data.weak_x, data.weak_level)):
        data.unl_pseudo[offset + i] = pseudo_labels(compute_cam(model, img, level), config.pseudo)


def train(config: TrainConfig, manifest: Manifest, out_dir, data: Optional[DomainData] = None):
    """Single-domain training; writes checkpoints and metrics.csv under ``out_dir``.

    Returns a summary dict with the metric rows and best / final validation mIoU.
    """
    config.validate()
    if config.mode == "cct_multidomain":
        raise ConfigError("use train_multidomain for cct_multidomain")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    weak = config.mode == "cct_weak"
    if data is None:
        data = DomainData(manifest, include_weak=weak)
    steps_per_epoch = math.ceil(len(data.unl_x) / config.batch)
    total_iters = config.epochs * steps_per_epoch
    state = init_state(config, data.num_classes, total_iters)
    roster_json = config.roster if config.mode != "supervised_baseline" else []
    log.info("run %s: %d auxiliary decoders, %d steps", config.mode, state.model.num_aux, total_iters)
    if weak:
        prepare_weak(config, data, state.model)

    rng = np.random.default_rng([config.seed, 5])
    lab_cycle = Cycle(len(data.lab_x), np.random.default_rng([config.seed, 1]))
    unl_cycle = Cycle(len(data.unl_x), np.random.default_rng([config.seed, 2]))
    rows = []
    best = -1.0
    final_miou = float("nan")
    for epoch in range(config.epochs):
        for it in range(steps_per_epoch):
            mixed = sample_iteration(lab_cycle, unl_cycle, config.batch)
            batch = make_batch(data, mixed, rng, config.augment, weak)
            metrics = train_step(state, batch, config)
            metrics["epoch"] = epoch
            metrics["miou_val"] = ""
            last = it == steps_per_epoch - 1
            if last and (epoch + 1) % config.eval_every == 0 or last and epoch == config.epochs - 1:
                metrics["miou_val"] = final_miou = _val_miou(state.model, data)
                if final_miou > best:
                    best = final_miou
                    save_checkpoint(state.model, out_dir / "best", state.step, roster_json)
            if last or (config.log_every and state.step % config.log_every == 0):
                rows.append(metrics)
    save_checkpoint(state.model, out_dir / "final", state.step, roster_json)
    _write_metrics(out_dir / "metrics.csv", rows)
    return {"rows": rows, "best_miou": best if best >= 0 else float("nan"), "final_miou": final_miou,
            "num_aux": state.model.num_aux, "state": state, "out_dir": out_dir}


@dataclass
class DomainSpec:
    name: str
    manifest: Manifest
    num_classes: int = 0
    data: Optional[DomainData] = None

    def load(self):
        if self.data is None:
            self.data = DomainData(self.manifest)
        self.num_classes = self.data.num_classes
        return self.data


def train_multidomain(config: TrainConfig, domain_specs: List[DomainSpec], out_dir):
    """Alternate steps between two domains that share the encoder but own their decoders."""
    config.validate()
    if len(domain_specs) != 2:
        raise ConfigError("cct_multidomain needs exactly two domains")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    datas = [spec.load() for spec in domain_specs]
    steps_per_epoch = 2 * max(math.ceil(len(d.unl_x) / config.batch) for d in datas)
    total_iters = config.epochs * steps_per_epoch
    state = init_state(config, [d.num_classes for d in datas], total_iters)
    rng = np.random.default_rng([config.seed, 5])
    cycles = [(Cycle(len(d.lab_x), np.random.default_rng([config.seed, 1, i])),
               Cycle(len(d.unl_x), np.random.default_rng([config.seed, 2, i])),
               Cycle(len(d.unl_x), np.random.default_rng([config.seed, 3, i]))) for i, d in enumerate(datas)]
    rows = []
    best = -1.0
    final_miou = float("nan")
    for epoch in range(config.epochs):
        for it in range(steps_per_epoch):
            dom = state.step % 2
            batch = multidomain_batch(datas, cycles, dom, config, rng)
            metrics = train_step(state, batch, config, domain=dom)
            metrics["epoch"] = epoch
            metrics["miou_val"] = ""
            last = it == steps_per_epoch - 1
            if last:
                scores = [_val_miou(state.model, d, i) for i, d in enumerate(datas)]
                metrics["miou_val"] = final_miou = float(np.nanmean(scores)) if any(
                    not math.isnan(s) for s in scores) else float("nan")
                if final_miou > best:
                    best = final_miou
                    save_checkpoint(state.model, out_dir / "best", state.step, config.roster)
            if last or (config.log_every and state.step % config.log_every == 0):
                rows.append(metrics)
    save_checkpoint(state.model, out_dir / "final", state.step, config.roster)
    _write_metrics(out_dir / "metrics.csv", rows)
    return {"rows": rows, "best_miou": best if best >= 0 else float("nan"), "final_miou": final_miou,
            "state": state, "out_dir": out_dir}


def multidomain_batch(datas, cycles, dom, config, rng):
    """Labeled + unlabeled batch from domain ``dom``; unlabeled images of the other domain ride along
    only when the adversarial branch needs them."""
    lab_cycle, unl_cycle, other_cycle = cycles[dom]
    mixed = sample_iteration(lab_cycle, unl_cycle, config.batch)
    batch = make_batch(datas[dom], mixed, rng, config.augment)
    if config.with_discriminator and config.loss.lambda_adv > 0:
        other = 1 - dom
        idx = cycles[other][2].take(len(mixed.unlabeled))
        imgs = []
        for i in idx:
            img = datas[other].unl_x[i]
            if config.augment:
                img, _ = augment(img, None, rng)
            imgs.append(img)
        batch.x_other = torch.as_tensor(np.stack(imgs), dtype=batch.x_l.dtype)
    return batch

"""Loss terms for cross-consistency training.

Every function takes raw logits or probability maps shaped (B, C, H, W) and
returns a scalar tensor. Any mean over an empty pixel set is 0, never NaN.
"""
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

IGNORE = 255
KL_CLAMP = 1e-8

DISTANCES = ("MSE", "KL", "JS")


@dataclass
class LossWeights:
    lambda_u: float = 30.0
    lambda_w: float = 0.4
    lambda_adv: float = 0.02
    distance: str = "MSE"
    conf_threshold: Optional[float] = None
    pairwise_subset: Optional[int] = None

    def validate(self):
        for name in ("lambda_u", "lambda_w", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}, got {self.distance!r}")
        if self.conf_threshold is not None and not 0.0 < self.conf_threshold < 1.0:
            raise ValueError("conf_threshold must lie in (0, 1)")
        if self.pairwise_subset is not None and self.pairwise_subset < 2:
            raise ValueError("pairwise_subset must be at least 2")


def _masked_mean(values, mask):
    count = mask.sum()
    if count == 0:
        return values.sum() * 0.0
    return (values * mask).sum() / count


def _pixel_ce(logits, target):
    """Per-pixel CE and a validity mask; IGNORE pixels get zero loss."""
    if logits.dim() != 4 or target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    num_classes = logits.shape[1]
    target = target.long()
    valid = target != IGNORE
    bad = valid & ((target < 0) | (target >= num_classes))
    if bad.any():
        raise ValueError(f"target contains class ids outside [0, {num_classes})")
    safe = torch.where(valid, target, torch.zeros_like(target))
    logp = F.log_softmax(logits, dim=1)
    nll = -logp.gather(1, safe.unsqueeze(1)).squeeze(1)
    return nll, valid, logp


def cross_entropy(logits, target):
    nll, valid, _ = _pixel_ce(logits, target)
    return _masked_mean(nll, valid.to(nll.dtype))


def ab_ce(logits, target, eta):
    """Annealed bootstrapped CE: only pixels whose true-class probability is below eta count."""
    eta = float(eta)
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    nll, valid, logp = _pixel_ce(logits, target)
    p_true = torch.exp(-nll.detach())
    # eta = 1 keeps every pixel, including ones saturated at p_true == 1.0
    hard = valid & ((p_true < eta) | (eta >= 1.0))
    return _masked_mean(nll, hard.to(nll.dtype))


def _pixel_kl(p, q):
    return torch.xlogy(p, p).sum(-3) - (p * torch.log(q.clamp_min(KL_CLAMP))).sum(-3)


def pixel_distance(p, q, kind="MSE"):
    """Per-pixel distance map between probability maps (..., C, H, W); channel axis reduced."""
    if kind == "MSE":
        return ((p - q) ** 2).mean(-3)
    if kind == "KL":
        return _pixel_kl(p, q)
    if kind == "JS":
        m = 0.5 * (p + q)
        return 0.5 * _pixel_kl(p, m) + 0.5 * _pixel_kl(q, m)
    raise ValueError(f"unknown distance {kind!r}")


def dist_mse(p, q):
    return pixel_distance(p, q, "MSE").mean()


def dist_kl(p, q):
    return pixel_distance(p, q, "KL").mean()


def dist_js(p, q):
    return pixel_distance(p, q, "JS").mean()


def consistency_loss(main_probs, aux_probs: Sequence[torch.Tensor], weights: LossWeights):
    """Mean distance between the (detached) main prediction and each auxiliary prediction.

    ``aux_probs`` is a list of (B, C, H, W) maps or one stacked (K, B, C, H, W) tensor.
    """
    if len(aux_probs) == 0:
        raise ValueError("consistency_loss needs at least one auxiliary prediction")
    if main_probs.requires_grad:
        raise ValueError("main_probs must be detached from the graph")
    if not torch.is_tensor(aux_probs):
        aux_probs = torch.stack(list(aux_probs))
    if weights.conf_threshold is not None:
        mask = (main_probs.max(1).values > weights.conf_threshold).to(main_probs.dtype)
    else:
        mask = torch.ones_like(main_probs[:, 0])
    dist = pixel_distance(main_probs.unsqueeze(0), aux_probs, weights.distance)
    count = mask.sum()
    if count == 0:
        return dist.sum() * 0.0
    return (dist * mask).sum() / (count * aux_probs.shape[0])


def weak_loss(pseudo, aux_logits: Sequence[torch.Tensor]):
    """Mean CE of every auxiliary prediction against the pseudo-label map."""
    if len(aux_logits) == 0:
        raise ValueError("weak_loss needs at least one auxiliary prediction")
    if not torch.is_tensor(aux_logits):
        aux_logits = torch.stack(list(aux_logits))
    K = aux_logits.shape[0]
    # same target for every decoder, so one pooled mean equals the mean of per-decoder means
    flat = aux_logits.reshape((-1,) + tuple(aux_logits.shape[2:]))
    return cross_entropy(flat, pseudo.repeat(K, 1, 1))


def pairwise_loss(aux_probs: Sequence[torch.Tensor]):
    """Variance of a subset of auxiliary predictions around their mean."""
    if len(aux_probs) < 2:
        raise ValueError("pairwise_loss needs a subset of at least two predictions")
    stack = aux_probs if torch.is_tensor(aux_probs) else torch.stack(list(aux_probs))
    return ((stack - stack.mean(0, keepdim=True)) ** 2).mean(0).mean()


def adversarial_loss(d_logits_dom1, d_logits_dom2):
    """Two-class domain CE: domain 1 cells should predict 0, domain 2 cells should predict 1."""
    loss1 = -F.log_softmax(d_logits_dom1, dim=1)[:, 0].mean()
    loss2 = -F.log_softmax(d_logits_dom2, dim=1)[:, 1].mean()
    return loss1 + loss2


def total_loss(loss_s, loss_u=None, loss_w=None, loss_pw=None, loss_adv=None,
               omega_u=0.0, omega_w=0.0, weights: Optional[LossWeights] = None):
    if omega_u < 0 or omega_w < 0:
        raise ValueError("ramp weights must be non-negative")
    lambda_adv = weights.lambda_adv if weights is not None else 0.0
    total = loss_s
    if loss_u is not None:
        total = total + omega_u * loss_u
    if loss_w is not None:
        total = total + omega_w * loss_w
    if loss_pw is not None:
        total = total + loss_pw
    if loss_adv is not None:
        total = total + lambda_adv * loss_adv
    return total

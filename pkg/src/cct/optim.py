from dataclasses import dataclass

import torch


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4


class NonFiniteGradient(FloatingPointError):
    pass


@torch.no_grad()
def sgd_update(params, grads, buffers, lr, momentum=0.9, weight_decay=1e-4):
    """In-place SGD with momentum and L2 weight decay.

    ``params`` and ``grads`` map names to tensors; a ``None`` gradient leaves
    the parameter (and its momentum buffer) untouched. ``buffers`` holds the
    velocity per name and is updated in place:
    ``v <- momentum * v + (g + weight_decay * p)``, ``p <- p - lr * v``.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        d = g + weight_decay * p if weight_decay else g.clone()
        v = buffers.get(name)
        if v is None:
            v = torch.zeros_like(p)
        v.mul_(momentum).add_(d)
        buffers[name] = v
        p.sub_(lr * v)
    return params


def step_module(module, buffers, lr, cfg: OptimizerConfig):
    """Apply :func:`sgd_update` to the ``.grad`` fields of a module's parameters."""
    params = dict(module.named_parameters())
    grads = {name: p.grad for name, p in params.items()}
    sgd_update(params, grads, buffers, lr, cfg.momentum, cfg.weight_decay)

"""Shared test utilities: a central finite-difference gradient oracle and tiny datasets."""
import numpy as np
import torch

FD_EPS = 1e-5
FD_RTOL = 1e-4


def fd_check(fn, inputs, n_samples=12, eps=FD_EPS, rtol=FD_RTOL, seed=0):
    """Compare autograd gradients of scalar ``fn(*inputs)`` with central differences.

    ``inputs`` are float64 tensors; up to ``n_samples`` coordinates of each are
    perturbed. Returns the worst relative error and raises AssertionError when
    it exceeds ``rtol``. The denominator is floored at 1e-6 * max(1, |f|):
    central differences carry roundoff of order 1e-11 * |f|, which would
    otherwise dominate coordinates whose true gradient is exactly zero.
    """
    inputs = [t.detach().clone().requires_grad_(True) for t in inputs]
    out = fn(*inputs)
    floor = 1e-6 * max(1.0, abs(out.item()))
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(inputs, grads):
        g = torch.zeros_like(t) if g is None else g
        flat = t.detach().view(-1)
        picks = rng.choice(flat.numel(), size=min(n_samples, flat.numel()), replace=False)
        for i in picks:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = fn(*inputs).item()
                flat[i] = orig - eps
                down = fn(*inputs).item()
                flat[i] = orig
            numeric = (up - down) / (2 * eps)
            analytic = g.view(-1)[i].item()
            err = abs(numeric - analytic) / max(floor, abs(numeric), abs(analytic))
            worst = max(worst, err)
    assert worst < rtol, f"finite-difference mismatch: relative error {worst:.3e}"
    return worst


def param_fd_check(module, loss_fn, n_per_param=3, eps=FD_EPS, rtol=FD_RTOL, seed=0):
    """Finite-difference check of ``loss_fn()`` against sampled coordinates of every parameter (same floor)."""
    params = [p for p in module.parameters() if p.requires_grad]
    loss = loss_fn()
    floor = 1e-6 * max(1.0, abs(loss.item()))
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        flat = p.data.view(-1)
        for i in rng.choice(flat.numel(), size=min(n_per_param, flat.numel()), replace=False):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
            numeric = (up - down) / (2 * eps)
            analytic = g.view(-1)[i].item()
            worst = max(worst, abs(numeric - analytic) / max(floor, abs(numeric), abs(analytic)))
    assert worst < rtol, f"parameter finite-difference mismatch: relative error {worst:.3e}"
    return worst


def tiny_spec(**overrides):
    from cct.datasynth import DatasetSpec
    base = dict(n_labeled=4, n_unlabeled=8, n_weak=0, n_val=4, H=32, W=32, seed=3)
    base.update(overrides)
    return DatasetSpec(**base)


# acceptance results, printed as PASS/FAIL lines in the terminal summary
ACCEPTANCE = {}

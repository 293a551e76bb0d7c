"""Apply each feature-space perturbation to an encoder output and report what it changed.

Run: python3 demos/perturbations.py
"""
import torch

from cct.model import CCTNet
from cct.perturb import DEFAULT_ROSTER, PerturbParams, apply_perturbation

torch.manual_seed(0)
net = CCTNet(4, num_aux=1, depth=64)
x = torch.rand(2, 3, 64, 64)
z = net.encode(x).detach()
pred = net.decode(z)  # main-decoder prediction guides the masking kinds

print(f"encoder output {tuple(z.shape)}, mean |z| = {z.abs().mean():.4f}")
for kind, count in DEFAULT_ROSTER:
    gen = torch.Generator().manual_seed(1)
    out = apply_perturbation(kind, z, gen, PerturbParams(), pred_logits=pred, decoder=net.heads[0].aux[0])
    zeroed = (((out == 0) & (z != 0)).sum() / (z != 0).sum()).item()
    change = (out - z).flatten(1).norm(dim=1) / z.flatten(1).norm(dim=1)
    print(f"{kind.value:9s} x{count}: {zeroed:6.1%} of nonzero activations zeroed, "
          f"relative change {change.mean():.3f}")

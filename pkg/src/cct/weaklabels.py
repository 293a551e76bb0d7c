"""Image-level supervision: classifier pretraining, CAMs and thresholded pseudo-labels."""
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .datasynth import IGNORE, augment
from .optim import OptimizerConfig, step_module
from .schedules import poly_lr


@dataclass
class PseudoLabelConfig:
    theta_bg: float = 0.05
    theta_fg: float = 0.30

    def validate(self):
        if not 0.0 <= self.theta_bg < self.theta_fg <= 1.0:
            raise ValueError(f"need 0 <= theta_bg < theta_fg <= 1, got {self.theta_bg}, {self.theta_fg}")


def image_level_bce(logits, present):
    return F.binary_cross_entropy_with_logits(logits, present.to(logits.dtype))


def pretrain_classifier(model, images, present, epochs=10, batch=8, opt=None, seed=0, use_augment=True):
    """Train encoder + classification branch with multi-label BCE; returns per-epoch mean losses."""
    present = np.asarray(present, dtype=bool)
    if len(images) == 0:
        raise ValueError("the weak split is empty")
    if not present.any(axis=1).all():
        raise ValueError("every weakly labeled image needs at least one present class")
    opt = opt or OptimizerConfig()
    rng = np.random.default_rng(seed)
    n = len(images)
    steps_per_epoch = -(-n // batch)
    total = max(1, epochs * steps_per_epoch)
    buffers = {}
    dtype = next(model.parameters()).dtype
    history = []
    step = 0
    model.train()
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            xs = []
            for i in idx:
                img = images[i]
                if use_augment:
                    # flips only: rescale + crop could cut a present class out of view
                    img, _ = augment(img, None, rng, scale=1.0)
                xs.append(img)
            x = torch.as_tensor(np.stack(xs), dtype=dtype)
            y = torch.as_tensor(present[idx])
            loss = image_level_bce(model.classify(model.encode(x)), y)
            model.zero_grad(set_to_none=True)
            loss.backward()
            step_module(model, buffers, poly_lr(step, total, opt.lr), opt)
            step += 1
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    return history


@torch.no_grad()
def compute_cam(model, x, present=None):
    """Class activation maps (C-1, H, W) normalized per class to [0, 1].

    ``x`` is one image (3, H, W); ``present`` optionally zeroes the maps of
    classes absent from the image-level label.
    """
    x = torch.as_tensor(np.asarray(x), dtype=next(model.parameters()).dtype)
    if x.dim() == 3:
        x = x[None]
    z = model.encode(x)
    weight = model.classifier.fc.weight
    cams = F.relu(torch.einsum("cd,bdhw->bchw", weight, z))
    cams = F.interpolate(cams, size=x.shape[2:], mode="bilinear", align_corners=False)[0]
    peak = cams.flatten(1).max(1).values.view(-1, 1, 1)
    cams = torch.where(peak > 0, cams / torch.where(peak > 0, peak, torch.ones_like(peak)),
                       torch.zeros_like(cams))
    cams = cams.clamp(0.0, 1.0).numpy()
    if present is not None:
        cams[~np.asarray(present, dtype=bool)] = 0.0
    return cams


def pseudo_labels(cams, cfg: PseudoLabelConfig = None):
    """Background below theta_bg, argmax class (+1) above theta_fg, IGNORE in between.

    Values exactly on a threshold are ignored; argmax ties resolve to the
    lowest class index.
    """
    cfg = cfg or PseudoLabelConfig()
    cfg.validate()
    cams = np.asarray(cams)
    score = cams.max(axis=0)
    cls = cams.argmax(axis=0)
    out = np.full(score.shape, IGNORE, dtype=np.uint8)
    out[score < cfg.theta_bg] = 0
    fg = score > cfg.theta_fg
    out[fg] = (cls[fg] + 1).astype(np.uint8)
    return out

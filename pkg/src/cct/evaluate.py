"""Confusion-matrix mIoU and multi-scale, flip-averaged inference."""
import warnings

import numpy as np
import torch
import torch.nn.functional as F

from .datasynth import IGNORE, load_example

DEFAULT_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5)


def accumulate(cm, pred, truth):
    """Add the pixels of one (pred, truth) pair to the (C, C) confusion matrix in place."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    C = cm.shape[0]
    valid = truth != IGNORE
    t = truth[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= C or p.min() < 0 or p.max() >= C):
        raise ValueError(f"class id outside [0, {C})")
    cm += np.bincount(t * C + p, minlength=C * C).reshape(C, C)
    return cm


def miou(cm):
    """Mean IoU over classes with a non-zero union; returns (mean, per-class array with NaN gaps)."""
    cm = np.asarray(cm, dtype=np.float64)
    inter = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - inter
    per_class = np.full(cm.shape[0], np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    if not present.any():
        warnings.warn("mIoU undefined: every class has an empty union")
        return float("nan"), per_class
    return float(per_class[present].mean()), per_class


@torch.no_grad()
def predict_probs(model, x, domain=0):
    return F.softmax(model(x, domain=domain), dim=1)


def _resize_for_model(x, scale):
    H, W = x.shape[2:]
    nh = max(8, int(round(H * scale / 8)) * 8)
    nw = max(8, int(round(W * scale / 8)) * 8)
    if (nh, nw) == (H, W):
        return x
    return F.interpolate(x, size=(nh, nw), mode="bilinear", align_corners=False)


@torch.no_grad()
def multiscale_probs(model, x, scales=DEFAULT_SCALES, flip=True, domain=0):
    """Average of softmax maps over rescaled (and mirrored) copies, resized back to (H, W)."""
    H, W = x.shape[2:]
    total = 0.0
    count = 0
    for scale in scales:
        xs = _resize_for_model(x, scale)
        variants = [False, True] if flip else [False]
        for mirrored in variants:
            inp = torch.flip(xs, dims=[3]) if mirrored else xs
            probs = predict_probs(model, inp, domain)
            if mirrored:
                probs = torch.flip(probs, dims=[3])
            if probs.shape[2:] != (H, W):
                probs = F.interpolate(probs, size=(H, W), mode="bilinear", align_corners=False)
            total = total + probs
            count += 1
    return total / count


@torch.no_grad()
def multiscale_infer(model, img, scales=DEFAULT_SCALES, flip=True, domain=0):
    """Label map (H, W) for a single image array (3, H, W) or a batch tensor (B, 3, H, W)."""
    x = torch.as_tensor(np.asarray(img), dtype=next(model.parameters()).dtype)
    single = x.dim() == 3
    if single:
        x = x[None]
    pred = multiscale_probs(model, x, scales, flip, domain).argmax(1).numpy().astype(np.uint8)
    return pred[0] if single else pred


@torch.no_grad()
def evaluate_arrays(model, images, labels, num_classes, multiscale=False, domain=0, batch_size=32):
    """mIoU report for in-memory images (3, H, W) and label maps (H, W)."""
    was_training = model.training
    model.eval()
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    dtype = next(model.parameters()).dtype
    for start in range(0, len(images), batch_size):
        x = torch.as_tensor(np.stack(images[start:start + batch_size]), dtype=dtype)
        if multiscale:
            preds = multiscale_probs(model, x, domain=domain).argmax(1).numpy()
        else:
            preds = predict_probs(model, x, domain).argmax(1).numpy()
        for pred, label in zip(preds, labels[start:start + batch_size]):
            accumulate(cm, pred, label)
    model.train(was_training)
    mean, per_class = miou(cm)
    return {
        "miou": mean,
        "per_class": [None if np.isnan(v) else float(v) for v in per_class],
        "num_images": len(images),
    }


def evaluate(model, entries, root, num_classes, multiscale=False, domain=0):
    """Evaluate labeled manifest entries; returns the JSON-ready report dict."""
    images, labels = [], []
    for entry in entries:
        img, label, _ = load_example(entry, root)
        images.append(img)
        labels.append(label)
    return evaluate_arrays(model, images, labels, num_classes, multiscale, domain)

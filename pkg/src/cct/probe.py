"""Local smoothness probes for the cluster assumption.

``input_smoothness`` compares each pixel's RGB patch with the eight patches one
stride away; ``feature_smoothness`` compares each upsampled encoder feature
vector with its eight pixel neighbours. Class boundaries should stand out at
the feature level far more than at the input level.
"""
import csv
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage
from scipy import ndimage

from .datasynth import IGNORE

NEIGHBOURS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
STATS_COLUMNS = ["image", "mean_boundary", "mean_interior", "ratio"]


def odd_patch(patch, H, W):
    """Window side actually used: even sizes grow by one so the window is centred,
    then shrink to the largest odd size that fits the image."""
    if patch < 1:
        raise ValueError("patch must be >= 1")
    size = patch + 1 if patch % 2 == 0 else patch
    limit = min(H, W)
    if size > limit:
        size = limit if limit % 2 else limit - 1
    return size


def _box_sum(a, size):
    """Sum of ``a`` over every size x size window, via an integral image; output shrinks by size-1."""
    s = np.pad(a, ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    return s[size:, size:] - s[:-size, size:] - s[size:, :-size] + s[:-size, :-size]


def input_smoothness(img, patch=20):
    """Mean Euclidean distance between each pixel's patch and its in-bounds neighbour patches.

    Patches are edge-padded at the image border (so a constant image maps to
    zero) and neighbours sit one patch width away in the eight compass
    directions; neighbours whose centre leaves the image are skipped.
    Returns an (H, W) map.
    """
    img = np.asarray(img, dtype=np.float64)
    _, H, W = img.shape
    size = odd_patch(patch, H, W)
    half = size // 2
    stride = size
    pad = half + stride
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    total = np.zeros((H, W))
    count = np.zeros((H, W))
    ys, xs = np.arange(H)[:, None], np.arange(W)[None, :]
    for dy, dx in NEIGHBOURS:
        sy, sx = dy * stride, dx * stride
        shifted = np.roll(padded, (-sy, -sx), axis=(1, 2))
        sq = ((padded - shifted) ** 2).sum(0)
        # window of pixel (y, x) covers padded rows y + pad - half .. y + pad + half
        win = _box_sum(sq, size)[pad - half:pad - half + H, pad - half:pad - half + W]
        inside = (ys + sy >= 0) & (ys + sy < H) & (xs + sx >= 0) & (xs + sx < W)
        total += np.where(inside, np.sqrt(np.maximum(win, 0.0)), 0.0)
        count += inside
    return total / np.maximum(count, 1)


def neighbour_distance(feats):
    """(D, H, W) array -> (H, W) mean Euclidean distance to in-bounds 8-neighbours."""
    feats = np.asarray(feats, dtype=np.float64)
    _, H, W = feats.shape
    total = np.zeros((H, W))
    count = np.zeros((H, W))
    for dy, dx in NEIGHBOURS:
        y0, y1 = max(0, -dy), H - max(0, dy)
        x0, x1 = max(0, -dx), W - max(0, dx)
        diff = feats[:, y0:y1, x0:x1] - feats[:, y0 + dy:y1 + dy, x0 + dx:x1 + dx]
        total[y0:y1, x0:x1] += np.sqrt((diff ** 2).sum(0))
        count[y0:y1, x0:x1] += 1
    return total / count


@torch.no_grad()
def feature_smoothness(img, model):
    """Encode, bilinearly upsample z to the image size, and measure 8-neighbour feature distances."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(img), dtype=dtype)[None]
    z = model.encode(x)
    z = F.interpolate(z, size=x.shape[2:], mode="bilinear", align_corners=False)
    model.train(was_training)
    return neighbour_distance(z[0].double().numpy())


def boundary_mask(label, width=1):
    """Pixels within ``width`` (chessboard) pixels of a change in ground-truth class.

    IGNORE pixels are never boundary or interior; use the returned ``valid`` mask.
    """
    label = np.asarray(label)
    valid = label != IGNORE
    edge = np.zeros(label.shape, dtype=bool)
    H, W = label.shape
    for dy, dx in NEIGHBOURS:
        y0, y1 = max(0, -dy), H - max(0, dy)
        x0, x1 = max(0, -dx), W - max(0, dx)
        a = label[y0:y1, x0:x1]
        b = label[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
        differ = (a != b) & (a != IGNORE) & (b != IGNORE)
        edge[y0:y1, x0:x1] |= differ
    if width > 1:
        edge = ndimage.binary_dilation(edge, structure=np.ones((3, 3), bool), iterations=width - 1)
    return edge & valid, valid


def boundary_stats(smooth, label, width=1):
    """(mean on boundary pixels, mean on interior pixels, ratio); NaN where undefined."""
    edge, valid = boundary_mask(label, width)
    interior = valid & ~edge
    mb = float(smooth[edge].mean()) if edge.any() else float("nan")
    mi = float(smooth[interior].mean()) if interior.any() else float("nan")
    ratio = mb / mi if mi and not np.isnan(mi) and not np.isnan(mb) else float("nan")
    return mb, mi, ratio


def heatmap(smooth):
    """Min-max normalized 8-bit grayscale; bright means a large neighbour distance."""
    lo, hi = float(smooth.min()), float(smooth.max())
    if hi <= lo:
        return np.zeros(smooth.shape, dtype=np.uint8)
    return np.round((smooth - lo) / (hi - lo) * 255).astype(np.uint8)


def save_heatmap(smooth, path):
    PILImage.fromarray(heatmap(smooth), mode="L").save(path, format="PNG")


def write_stats(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=STATS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if isinstance(v, float) and np.isnan(v) else v) for k, v in row.items()})


def probe_images(items, out_dir, model=None, patch=20, width=1):
    """Run both probes over ``items`` = [(name, image, label or None)].

    Writes ``<name>_input.png`` (and ``<name>_feature.png`` with a model) plus
    ``stats_input.csv`` and, with a model, ``stats.csv`` for the feature level;
    without a model ``stats.csv`` holds the input-level numbers.
    Returns {"input": rows, "feature": rows}.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = {"input": [], "feature": []}
    for name, img, label in items:
        stem = Path(name).stem
        maps = {"input": input_smoothness(img, patch)}
        if model is not None:
            maps["feature"] = feature_smoothness(img, model)
        for level, smooth in maps.items():
            save_heatmap(smooth, out_dir / f"{stem}_{level}.png")
            if label is not None:
                mb, mi, ratio = boundary_stats(smooth, label, width)
            else:
                mb = mi = ratio = float("nan")
            rows[level].append({"image": name, "mean_boundary": mb, "mean_interior": mi, "ratio": ratio})
    write_stats(out_dir / "stats_input.csv", rows["input"])
    write_stats(out_dir / "stats.csv", rows["feature"] if model is not None else rows["input"])
    return rows

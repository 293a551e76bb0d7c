"""Deterministic synthetic shapes datasets, loading, augmentation and sampling.

Each image holds 1-4 non-overlapping anti-aliased shapes of distinct classes
(disk, rectangle, triangle) on a noisy, smoothly shaded
background. Class 0 is background; shape kinds map to classes 1..C-1 in the
order given by ``DatasetSpec.shape_kinds``. Every example derives its own
sub-seed from ``(seed, split, index)`` so output depends only on the spec.
Shape colours lean towards a per-class hue; ``hue_jitter`` controls how far
they stray, so colour alone is only a partial cue.
"""
import colorsys
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

IGNORE = 255
SHAPE_KINDS = ("disk", "rectangle", "triangle")
SPLITS = ("labeled", "unlabeled", "weak", "val")
_SPLIT_IDS = {name: i for i, name in enumerate(SPLITS)}
_SUPERSAMPLE = 4


class LoadError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    n_labeled: int = 20
    n_unlabeled: int = 480
    n_weak: int = 0
    n_val: int = 100
    H: int = 64
    W: int = 64
    shape_kinds: List[str] = field(default_factory=lambda: list(SHAPE_KINDS))
    noise_level: float = 0.08
    hue_jitter: float = 0.2
    size_range: Tuple[float, float] = (0.22, 0.4)
    seed: int = 0
    name: str = "shapes"

    @property
    def num_classes(self):
        return len(self.shape_kinds) + 1

    def validate(self):
        for name in ("n_labeled", "n_unlabeled", "n_weak", "n_val"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.H < 32 or self.W < 32 or self.H % 8 or self.W % 8:
            raise ConfigError("H and W must be multiples of 8 and at least 32")
        if not self.shape_kinds or len(set(self.shape_kinds)) != len(self.shape_kinds):
            raise ConfigError("shape_kinds must be a non-empty list of distinct kinds")
        bad = set(self.shape_kinds) - set(SHAPE_KINDS)
        if bad:
            raise ConfigError(f"unknown shape kinds: {sorted(bad)}")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be >= 0")
        if not 0.0 <= self.hue_jitter <= 0.5:
            raise ConfigError("hue_jitter must lie in [0, 0.5]")
        lo, hi = self.size_range
        if not 0.05 <= lo <= hi <= 0.6:
            raise ConfigError("size_range must satisfy 0.05 <= low <= high <= 0.6 (fractions of min(H, W))")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown dataset spec keys: {sorted(unknown)}")
        d = dict(d)
        if "size_range" in d:
            d["size_range"] = tuple(d["size_range"])
        return cls(**d)


@dataclass
class Manifest:
    domains: list
    root: Path = Path(".")

    def entries(self, split=None, domain=0):
        entries = self.domains[domain]["entries"]
        return [e for e in entries if split is None or e["split"] == split]

    def num_classes(self, domain=0):
        return self.domains[domain]["num_classes"]

    def to_json(self):
        return {"domains": self.domains}


def write_manifest(manifest: Manifest, path):
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2))


def read_manifest(path, check_files=True) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read manifest {path}: {exc}") from exc
    root = path.parent
    for dom in data.get("domains", []):
        for entry in dom["entries"]:
            split = entry.get("split")
            if split not in SPLITS:
                raise LoadError(f"{path}: unknown split {split!r}")
            if split in ("labeled", "val") and not entry.get("label"):
                raise LoadError(f"{path}: {split} entry {entry['image']} has no label")
            if split == "weak" and entry.get("image_level") is None:
                raise LoadError(f"{path}: weak entry {entry['image']} has no image-level label")
            if check_files:
                for key in ("image", "label", "pseudo_label"):
                    if entry.get(key) and not (root / entry[key]).exists():
                        raise LoadError(f"{path}: missing file {root / entry[key]}")
    return Manifest(data.get("domains", []), root)


# -- rendering -------------------------------------------------------------

def _shape_sampler(kind, cy, cx, size, rng):
    """Return an inside-test f(y, x) -> bool array and the shape's bounding box."""
    if kind == "disk":
        r = size / 2.0

        def inside(y, x):
            return (y - cy) ** 2 + (x - cx) ** 2 <= r * r
        return inside, (cy - r, cx - r, cy + r, cx + r)
    if kind == "rectangle":
        aspect = rng.uniform(0.6, 1.6)
        hh = size / 2.0 * math.sqrt(aspect) * 0.9
        hw = size / 2.0 / math.sqrt(aspect) * 0.9

        def inside(y, x):
            return (np.abs(y - cy) <= hh) & (np.abs(x - cx) <= hw)
        return inside, (cy - hh, cx - hw, cy + hh, cx + hw)
    if kind == "triangle":
        r = size / 2.0 * 1.1
        theta = rng.uniform(0, 2 * math.pi)
        pts = [(cy + r * math.sin(theta + k * 2 * math.pi / 3),
                cx + r * math.cos(theta + k * 2 * math.pi / 3)) for k in range(3)]

        def inside(y, x):
            signs = []
            for (y0, x0), (y1, x1) in zip(pts, pts[1:] + pts[:1]):
                signs.append((x1 - x0) * (y - y0) - (y1 - y0) * (x - x0))
            s = np.stack(signs)
            return np.all(s >= 0, axis=0) | np.all(s <= 0, axis=0)
        ys = [p[0] for p in pts]
        xs = [p[1] for p in pts]
        return inside, (min(ys), min(xs), max(ys), max(xs))
    raise ConfigError(f"unknown shape kind {kind!r}")


def _coverage(inside, H, W):
    """Fraction of each pixel covered by the shape, by 4x4 supersampling."""
    offs = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE
    ys = (np.arange(H)[:, None] + offs[None, :]).reshape(-1)
    xs = (np.arange(W)[:, None] + offs[None, :]).reshape(-1)
    hit = inside(ys[:, None], xs[None, :]).astype(np.float64)
    return hit.reshape(H, _SUPERSAMPLE, W, _SUPERSAMPLE).mean(axis=(1, 3))


def _background(rng, H, W, noise_level):
    base = rng.uniform(0.25, 0.75, size=3)
    gy, gx = rng.uniform(-0.25, 0.25, size=(2, 3))
    yy = np.linspace(-0.5, 0.5, H)[None, :, None]
    xx = np.linspace(-0.5, 0.5, W)[None, None, :]
    img = base[:, None, None] + gy[:, None, None] * yy + gx[:, None, None] * xx
    return img + rng.normal(0.0, noise_level, size=(3, H, W))


def _shape_colour(cls, n_fg, hue_jitter, rng):
    """Class k leans towards hue k / n_fg; a jitter of 0.5 makes hue uninformative."""
    hue = (cls / n_fg + rng.uniform(-hue_jitter, hue_jitter)) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.4, 1.0), rng.uniform(0.4, 1.0)))


def render_example(spec: DatasetSpec, rng):
    """Render one (image, label) pair; image float (3, H, W) in [0, 1], label uint8 (H, W)."""
    H, W = spec.H, spec.W
    img = _background(rng, H, W, spec.noise_level)
    label = np.zeros((H, W), dtype=np.uint8)
    n_fg = len(spec.shape_kinds)
    n_shapes = int(rng.integers(1, min(4, n_fg) + 1))
    classes = rng.choice(n_fg, size=n_shapes, replace=False)
    occupied = np.zeros((H, W), dtype=bool)
    for cls in classes:
        kind = spec.shape_kinds[cls]
        for _ in range(50):
            size = rng.uniform(*spec.size_range) * min(H, W)
            cy = rng.uniform(size / 2 + 1, H - size / 2 - 1)
            cx = rng.uniform(size / 2 + 1, W - size / 2 - 1)
            inside, (y0, x0, y1, x1) = _shape_sampler(kind, cy, cx, size, rng)
            box = np.zeros_like(occupied)
            box[max(0, int(y0) - 2):min(H, int(math.ceil(y1)) + 3),
                max(0, int(x0) - 2):min(W, int(math.ceil(x1)) + 3)] = True
            if not (box & occupied).any():
                break
        else:
            continue
        cov = _coverage(inside, H, W)
        colour = _shape_colour(cls, n_fg, spec.hue_jitter, rng)
        img = img * (1.0 - cov) + colour[:, None, None] * cov
        label[cov >= 0.5] = cls + 1
        occupied |= box
    img = img + rng.normal(0.0, spec.noise_level * 0.5, size=img.shape)
    return np.clip(img, 0.0, 1.0), label


def _save_png(arr, path):
    PILImage.fromarray(arr).save(path, format="PNG")


def generate_dataset(spec: DatasetSpec, out_dir) -> Manifest:
    spec.validate()
    out_dir = Path(out_dir)
    entries = []
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "labels").mkdir(parents=True, exist_ok=True)
        for split, count in (("labeled", spec.n_labeled), ("unlabeled", spec.n_unlabeled),
                             ("weak", spec.n_weak), ("val", spec.n_val)):
            for i in range(count):
                rng = np.random.default_rng([spec.seed, _SPLIT_IDS[split], i])
                img, label = render_example(spec, rng)
                stem = f"{split}_{i:04d}"
                img_rel = f"images/{stem}.png"
                _save_png(np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8), out_dir / img_rel)
                entry = {"image": img_rel, "label": None, "image_level": None, "split": split}
                if split in ("labeled", "val"):
                    entry["label"] = f"labels/{stem}.png"
                    _save_png(label, out_dir / entry["label"])
                elif split == "weak":
                    present = [int((label == c + 1).any()) for c in range(spec.num_classes - 1)]
                    entry["image_level"] = present
                entries.append(entry)
        manifest = Manifest([{"name": spec.name, "num_classes": spec.num_classes, "entries": entries}],
                            out_dir)
        write_manifest(manifest, out_dir / "manifest.json")
        (out_dir / "dataset_spec.json").write_text(json.dumps(asdict(spec), indent=2))
    except OSError as exc:
        raise OSError(f"failed writing dataset under {out_dir}: {exc}") from exc
    return manifest


# -- loading -----------------------------------------------------------------

def load_image(path):
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot load image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1) / 255.0


def load_label(path):
    try:
        with PILImage.open(path) as im:
            if im.mode not in ("L", "P"):
                raise LoadError(f"label {path} is not a single-channel PNG (mode {im.mode})")
            return np.array(im, dtype=np.uint8)
    except OSError as exc:
        raise LoadError(f"cannot load label {path}: {exc}") from exc


def load_example(entry, root="."):
    """Load (image, label or None, image-level label or None) for a manifest entry."""
    root = Path(root)
    img = load_image(root / entry["image"])
    label = None
    level = None
    if entry["split"] in ("labeled", "val"):
        label = load_label(root / entry["label"])
        if label.shape != img.shape[1:]:
            raise LoadError(f"label {entry['label']} shape {label.shape} != image {img.shape[1:]}")
    elif entry["split"] == "weak":
        level = np.asarray(entry["image_level"], dtype=bool)
        if not level.any():
            raise LoadError(f"weak entry {entry['image']} has no class present")
    return img, label, level


# -- augmentation ------------------------------------------------------------

def augment(img, lbl, rng, scale=None, flip=None, crop=None):
    """Random rescale in [0.5, 2], crop/pad back to (H, W), horizontal flip.

    ``scale``, ``flip`` and ``crop`` (a (top, left) offset) override the random
    draws. Padding uses 0 for the image and IGNORE for the label.
    """
    _, H, W = img.shape
    if scale is None:
        scale = rng.uniform(0.5, 2.0)
    nh, nw = max(1, int(round(H * scale))), max(1, int(round(W * scale)))
    if (nh, nw) != (H, W):
        t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None]
        img = F.interpolate(t, size=(nh, nw), mode="bilinear", align_corners=False)[0].numpy()
        if lbl is not None:
            lt = torch.from_numpy(lbl.astype(np.float32))[None, None]
            lbl = F.interpolate(lt, size=(nh, nw), mode="nearest")[0, 0].numpy().astype(np.uint8)
    ph, pw = max(H, nh), max(W, nw)
    if (ph, pw) != (nh, nw):
        padded = np.zeros((img.shape[0], ph, pw), dtype=img.dtype)
        padded[:, :nh, :nw] = img
        img = padded
        if lbl is not None:
            plab = np.full((ph, pw), IGNORE, dtype=np.uint8)
            plab[:nh, :nw] = lbl
            lbl = plab
    if crop is None:
        crop = (int(rng.integers(0, ph - H + 1)), int(rng.integers(0, pw - W + 1)))
    top, left = crop
    img = img[:, top:top + H, left:left + W]
    if lbl is not None:
        lbl = lbl[top:top + H, left:left + W]
    if flip is None:
        flip = rng.random() < 0.5
    if flip:
        img = img[:, :, ::-1]
        if lbl is not None:
            lbl = lbl[:, ::-1]
    img = np.ascontiguousarray(img, dtype=np.float32)
    if lbl is not None:
        lbl = np.ascontiguousarray(lbl)
    return img, lbl


# -- sampling ----------------------------------------------------------------

class Cycle:
    """Endless index stream over ``n`` items, reshuffled at every wrap."""

    def __init__(self, n, rng, shuffle=True):
        self.n = n
        self.rng = rng
        self.shuffle = shuffle
        self.epoch = 0
        self._order = self._new_order()
        self._pos = 0

    def _new_order(self):
        return self.rng.permutation(self.n) if self.shuffle else np.arange(self.n)

    @property
    def remaining(self):
        return self.n - self._pos

    def _wrap(self):
        self._order = self._new_order()
        self._pos = 0
        self.epoch += 1

    def take(self, k, bounded=False):
        """Next ``k`` indices; with ``bounded`` the draw stops at the end of the current pass."""
        out = []
        while len(out) < k:
            if self._pos == self.n:
                if bounded and out:
                    break
                self._wrap()
            step = min(k - len(out), self.n - self._pos)
            out.extend(int(i) for i in self._order[self._pos:self._pos + step])
            self._pos += step
        return out


@dataclass
class MixedBatch:
    labeled: List[int]
    unlabeled: List[int]


def sample_iteration(labeled_cycle: Optional[Cycle], unlabeled_cycle: Cycle, batch) -> MixedBatch:
    """Draw up to ``batch`` unlabeled indices (never crossing an epoch) and as many labeled ones."""
    if labeled_cycle is None or labeled_cycle.n == 0:
        raise ConfigError("the labeled set is empty; purely unsupervised training is not supported")
    if unlabeled_cycle.n == 0:
        raise ConfigError("the unlabeled set is empty")
    unl = unlabeled_cycle.take(batch, bounded=True)
    lab = labeled_cycle.take(len(unl))
    return MixedBatch(lab, unl)

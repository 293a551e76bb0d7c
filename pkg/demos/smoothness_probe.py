"""Compare input-level and feature-level smoothness around class boundaries.

Run: python3 demos/smoothness_probe.py CHECKPOINT_DIR DATA_DIR [out_dir]
Bright heatmap pixels mean a large distance to the neighbours.
"""
import sys
from pathlib import Path

import numpy as np

from cct.checkpoint import load_checkpoint
from cct.datasynth import load_image, load_label, read_manifest
from cct.probe import probe_images

ckpt, data_dir = sys.argv[1], sys.argv[2]
out = Path(sys.argv[3] if len(sys.argv) > 3 else "demo_probe")
model, _ = load_checkpoint(ckpt)
manifest = read_manifest(data_dir)
items = [(Path(e["image"]).name, load_image(manifest.root / e["image"]), load_label(manifest.root / e["label"]))
         for e in manifest.entries("val")[:10]]
rows = probe_images(items, out, model)
for level in ("input", "feature"):
    ratios = [r["ratio"] for r in rows[level]]
    print(f"{level:7s} boundary/interior ratio: mean {np.nanmean(ratios):.3f}")
print(f"heatmaps and stats written to {out}")

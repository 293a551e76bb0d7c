"""Pretrain the classification branch on image-level labels, then turn CAMs into pseudo-labels.

Run: python3 demos/weak_labels.py [out_dir]
The weak split stores no masks, so this demo derives image-level labels from a
labeled split and scores the pseudo-labels against the true masks.
"""
import sys
from pathlib import Path

import numpy as np
import torch

from cct.datasynth import IGNORE, DatasetSpec, generate_dataset, load_example, read_manifest
from cct.model import CCTNet
from cct.weaklabels import PseudoLabelConfig, compute_cam, pretrain_classifier, pseudo_labels

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_weak")
torch.set_num_threads(1)
generate_dataset(DatasetSpec(n_labeled=80, n_unlabeled=4, n_val=4, seed=1), out)
manifest = read_manifest(out)
C = manifest.num_classes()
examples = [load_example(e, manifest.root)[:2] for e in manifest.entries("labeled")]
images = [img for img, _ in examples]
levels = [np.isin(np.arange(1, C), label) for _, label in examples]

torch.manual_seed(0)
net = CCTNet(C, num_aux=0)
history = pretrain_classifier(net, images, levels, epochs=150, batch=8)
print(f"image-level BCE: {history[0]:.3f} -> {history[-1]:.3f}")

net.eval()
agree = labeled = total = hits = peaks = 0
for (img, truth), level in zip(examples, levels):
    cams = compute_cam(net, img, level)
    for c in np.flatnonzero(level):
        y, x = np.unravel_index(cams[c].argmax(), cams[c].shape)
        hits += truth[y, x] == c + 1
        peaks += 1
    pl = pseudo_labels(cams, PseudoLabelConfig())
    keep = pl != IGNORE
    labeled += keep.sum()
    total += pl.size
    agree += (pl[keep] == truth[keep]).sum()
print(f"CAM peak falls inside its class region for {hits / peaks:.1%} of present classes")
print(f"pseudo-labels cover {labeled / total:.1%} of pixels; "
      f"{agree / max(labeled, 1):.1%} of covered pixels match the ground truth")

"""Train a supervised baseline and CCT on the same small split and compare validation mIoU.

Run: python3 demos/train_compare.py [epochs] [out_dir]
A full-size comparison (20 labeled + 480 unlabeled, three seeds) is the
slow acceptance test; this demo uses a smaller split so it finishes in a
couple of minutes on one CPU. At this scale, with an encoder trained from
scratch, CCT does not beat the baseline (see README).
"""
import sys
from pathlib import Path

import torch

from cct.datasynth import DatasetSpec, generate_dataset, read_manifest
from cct.trainer import DomainData, TrainConfig, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 12
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_runs")
torch.set_num_threads(1)
generate_dataset(DatasetSpec(n_labeled=20, n_unlabeled=160, n_val=50, seed=0), out / "data")
manifest = read_manifest(out / "data")
data = DomainData(manifest)

for name, overrides in [("baseline", {"mode": "supervised_baseline", "use_abce": False}),
                        ("cct", {"mode": "cct", "use_abce": False}),
                        ("cct+abce", {"mode": "cct", "use_abce": True})]:
    cfg = TrainConfig.from_dict({"epochs": epochs, "seed": 0, **overrides})
    result = train(cfg, manifest, out / name, data=data)
    curve = " ".join(f"{row['miou_val']:.3f}" for row in result["rows"])
    print(f"{name:9s} final mIoU {result['final_miou']:.3f}  per epoch: {curve}")

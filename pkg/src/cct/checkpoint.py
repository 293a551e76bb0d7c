"""Checkpoint directories: one binary array file per named parameter plus meta.json.

Array file layout: 8-byte magic ``CCTARRAY``, little-endian u32 rank,
u32 dims[rank], then the float64 payload in row-major order.
"""
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import CCTNet

MAGIC = b"CCTARRAY"


class CheckpointError(RuntimeError):
    pass


def write_array(path, arr):
    # asarray, not ascontiguousarray: the latter turns 0-d arrays into 1-d ones
    arr = np.asarray(arr, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_array(path):
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (rank,) = struct.unpack_from("<I", data, 8)
    shape = struct.unpack_from(f"<{rank}I", data, 12)
    offset = 12 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(data) - offset != 8 * count:
        raise CheckpointError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(data, dtype="<f8", offset=offset).reshape(shape).copy()


def save_checkpoint(model: CCTNet, out_dir, step=0, aux_roster=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, tensor in model.state_dict().items():
        write_array(out_dir / f"{name}.bin", tensor.detach().cpu().double().numpy())
    meta = {
        "C": model.num_classes,
        "D": model.depth,
        "aux_roster": aux_roster or [],
        "step": int(step),
        "domain_classes": model.domain_classes,
        "num_aux": model.num_aux,
        "widths": list(model.widths),
        "with_discriminator": model.discriminator is not None,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2))
    return out_dir


def load_checkpoint(ckpt_dir, dtype=torch.float32):
    """Rebuild the network stored in ``ckpt_dir``; returns (model, meta)."""
    ckpt_dir = Path(ckpt_dir)
    meta_path = ckpt_dir / "meta.json"
    if not meta_path.exists():
        raise CheckpointError(f"{ckpt_dir}: missing meta.json")
    meta = json.loads(meta_path.read_text())
    model = CCTNet(meta.get("domain_classes", [meta["C"]]), num_aux=meta.get("num_aux", 0),
                   depth=meta["D"], widths=tuple(meta.get("widths", (16, 32, 64))),
                   with_discriminator=meta.get("with_discriminator", False))
    state = {}
    for name in model.state_dict():
        path = ckpt_dir / f"{name}.bin"
        if not path.exists():
            raise CheckpointError(f"{ckpt_dir}: missing parameter file {path.name}")
        state[name] = torch.from_numpy(read_array(path))
    model.load_state_dict(state)
    return model.to(dtype), meta

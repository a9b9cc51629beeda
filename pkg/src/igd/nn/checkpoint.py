"""Checkpoint container.

Layout: the 8-byte magic ``IGDCKPT1``, a little-endian ``uint32`` header
length, a UTF-8 JSON header, then the raw parameter blobs as little-endian
float32 in the order listed by the header (model first, then EMA).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"IGDCKPT1"


class CheckpointError(ValueError):
    pass


def _entries(state: dict, prefix: str):
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        yield f"{prefix}/{name}", arr


def save_checkpoint(path, model, ema, header: dict) -> None:
    blobs, index = [], []
    for key, arr in list(_entries(model.state_dict(), "model")) + list(_entries(ema.state_dict(), "ema")):
        index.append({"name": key, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    head = dict(header, version=1, tensors=index)
    raw = json.dumps(head, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict, dict]:
    """Returns ``(header, model_state, ema_state)`` with float32 tensors."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n].decode())
    off = 12 + n
    states = {"model": {}, "ema": {}}
    for ent in header["tensors"]:
        count = int(np.prod(ent["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(ent["shape"])
        off += 4 * count
        kind, name = ent["name"].split("/", 1)
        states[kind][name] = torch.from_numpy(arr.copy())
    if off != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return header, states["model"], states["ema"]

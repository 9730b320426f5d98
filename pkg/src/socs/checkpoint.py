"""Checkpoints: a JSON manifest followed by little-endian float32 tensor data.

Layout: 8-byte little-endian header length, UTF-8 JSON header, then the
tensors back to back.  The header carries the model config and, per tensor,
its name, shape and byte offset relative to the start of the data section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from socs.errors import DataError
from socs.model import ModelConfig, SocsNet

MAGIC = "socs-ckpt-1"


def save_checkpoint(model: SocsNet, path, extra: dict | None = None) -> None:
    tensors, blobs, offset = [], [], 0
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({
        "format": MAGIC,
        "config": model.config.to_dict(),
        "tensors": tensors,
        "extra": extra or {},
    }, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_header(path) -> dict:
    with Path(path).open("rb") as f:
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n).decode("utf-8"))
    if header.get("format") != MAGIC:
        raise DataError(f"{path}: not a checkpoint")
    return header


def load_checkpoint(path, dtype: str | None = None) -> SocsNet:
    data = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8 : 8 + n].decode("utf-8"))
    if header.get("format") != MAGIC:
        raise DataError(f"{path}: not a checkpoint")
    cfg = header["config"]
    if dtype is not None:
        cfg["dtype"] = dtype
    model = SocsNet(ModelConfig(**cfg))
    base = 8 + n
    state = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=base + t["offset"]).reshape(t["shape"])
        state[t["name"]] = torch.as_tensor(arr.copy())
    model.load_state_dict(state)
    return model

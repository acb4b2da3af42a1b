"""Single-file checkpoints: JSON header with a parameter manifest, float32 body."""

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .._validation import ValidationError

MAGIC = b"SPKACKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


def save_checkpoint(path, tensors, optimizer_state=None, meta=None):
    """``tensors``: ordered ``{name: tensor}``; ``optimizer_state``: ``{(name, slot): tensor}``."""
    optimizer_state = optimizer_state or {}
    header = {
        "version": FORMAT_VERSION,
        "params": [{"name": n, "shape": list(t.shape)} for n, t in tensors.items()],
        "optimizer": [{"name": n, "slot": s, "shape": list(t.shape)} for (n, s), t in optimizer_state.items()],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for t in [*tensors.values(), *optimizer_state.values()]:
            fh.write(np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes())


def load_checkpoint(path):
    """Return ``(tensors, optimizer_state, meta)`` as float32 torch tensors."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen])
    offset = _PREFIX.size + hlen

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        return torch.from_numpy(arr.copy())

    tensors = {e["name"]: take(e["shape"]) for e in header["params"]}
    opt = {(e["name"], e["slot"]): take(e["shape"]) for e in header["optimizer"]}
    if offset != len(raw):
        raise ValidationError(f"{path}: trailing or missing bytes in checkpoint body")
    return tensors, opt, header["meta"]

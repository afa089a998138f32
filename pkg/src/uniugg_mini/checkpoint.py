"""Binary checkpoint: magic, JSON header, then raw little-endian float32 blobs.

Layout::

    b"UUGGCKPT" | uint32 version | uint64 header length | header JSON (utf-8) | blobs

The header holds the run config snapshot, the global step, free-form metadata and one
entry ``{name, shape, offset, nbytes}`` per tensor; offsets are relative to the end of
the header.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError

MAGIC = b"UUGGCKPT"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    step: int
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def torch_tensors(self, prefix: str = "") -> dict[str, torch.Tensor]:
        """Tensors whose name starts with ``prefix``, with the prefix stripped."""
        return {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items() if k.startswith(prefix)}


def save_checkpoint(path, tensors: dict[str, torch.Tensor | np.ndarray], config: dict, step: int,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        if arr.dtype != np.float32:
            raise ConfigurationError(f"tensor {name!r} has dtype {arr.dtype}; checkpoints hold float32 only")
        data = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"config": config, "step": int(step), "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for data in blobs:
            fh.write(data)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    base = start + hlen
    tensors = {}
    for e in header["tensors"]:
        lo = base + e["offset"]
        if lo + e["nbytes"] > len(raw):
            raise ConfigurationError(f"{path}: truncated blob {e['name']!r}")
        arr = np.frombuffer(raw, dtype=_DTYPE, count=e["nbytes"] // 4, offset=lo)
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return Checkpoint(tensors, header["config"], header["step"], header["meta"], version)

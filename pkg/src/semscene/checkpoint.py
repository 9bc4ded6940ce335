"""Checkpoint persistence: a text manifest plus one raw float64 blob.

The manifest has one line per tensor, ``<name> <d0>x<d1>x... <byte offset>``,
sorted by name.  The blob concatenates the tensors' row-major little-endian
float64 bytes at the stated offsets.  Round-trips are byte-exact.
"""

from __future__ import annotations

import os
from typing import Mapping

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor

MANIFEST_SUFFIX = ".manifest"
BLOB_SUFFIX = ".blob"


def _paths(prefix: str) -> tuple[str, str]:
    return prefix + MANIFEST_SUFFIX, prefix + BLOB_SUFFIX


def save_checkpoint(prefix: str, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    manifest_path, blob_path = _paths(prefix)
    os.makedirs(os.path.dirname(os.path.abspath(manifest_path)), exist_ok=True)
    lines = []
    offset = 0
    with open(blob_path, "wb") as blob:
        for name in sorted(tensors):
            if any(ch.isspace() for ch in name):
                raise ContractViolation(f"tensor name may not contain spaces: {name!r}")
            data = tensors[name].data if isinstance(tensors[name], Tensor) else tensors[name]
            data = np.ascontiguousarray(data, dtype=np.float64)
            shape = "x".join(str(d) for d in data.shape) or "1"
            lines.append(f"{name} {shape} {offset}")
            raw = data.astype("<f8", copy=False).tobytes()
            blob.write(raw)
            offset += len(raw)
    with open(manifest_path, "w") as mf:
        mf.write("\n".join(lines) + "\n")


def load_checkpoint(prefix: str) -> dict[str, np.ndarray]:
    manifest_path, blob_path = _paths(prefix)
    with open(blob_path, "rb") as bf:
        blob = bf.read()
    out: dict[str, np.ndarray] = {}
    with open(manifest_path) as mf:
        for line in mf:
            line = line.strip()
            if not line:
                continue
            name, shape_text, offset_text = line.split(" ")
            shape = tuple(int(d) for d in shape_text.split("x"))
            offset = int(offset_text)
            count = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            out[name] = arr.reshape(shape).copy()
    return out


def load_into(prefix: str, params: Mapping[str, Tensor]) -> None:
    """Load a checkpoint into existing named parameters; any name or shape
    mismatch raises with a full per-tensor diff."""
    stored = load_checkpoint(prefix)
    problems = []
    for name in sorted(set(stored) | set(params)):
        if name not in stored:
            problems.append(f"  {name}: missing from checkpoint "
                            f"(config expects {tuple(params[name].shape)})")
        elif name not in params:
            problems.append(f"  {name}: missing from config "
                            f"(checkpoint holds {stored[name].shape})")
        elif stored[name].shape != tuple(params[name].shape):
            problems.append(f"  {name}: checkpoint {stored[name].shape} vs "
                            f"config {tuple(params[name].shape)}")
    if problems:
        raise ContractViolation(
            "checkpoint does not match network configuration:\n" + "\n".join(problems))
    for name, tensor in params.items():
        tensor.data[...] = stored[name]

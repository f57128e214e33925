"""Endian-pinned binary formats for checkpoints and feature files.

Checkpoint: magic ``HQFC``, version u32, then named blobs
(name length u32, UTF-8 name, rank u32, dims u32 LE, f32 LE data).
Feature file: magic ``HQFT``, rank u32, dims u32 LE, f32 LE row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"HQFC"
FEATURE_MAGIC = b"HQFT"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


def _write_array(fh, arr: np.ndarray) -> None:
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_array(fh) -> np.ndarray:
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4")
    if data.size != count:
        raise FormatError("truncated array payload")
    return data.reshape(dims).astype(np.float64)


def save_checkpoint(path, named_params) -> None:
    """Write (name, tensor-like) pairs as f32 blobs in the given order."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, t in named_params:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            arr = t.data if hasattr(t, "data") else np.asarray(t)
            _write_array(fh, arr)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into an ordered name -> float64 array mapping."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (n,) = struct.unpack("<I", head)
            name = fh.read(n).decode("utf-8")
            out[name] = _read_array(fh)
    return out


def apply_checkpoint(named_params, blobs: dict[str, np.ndarray]) -> None:
    """Load saved arrays into live tensors; names and shapes must match."""
    names = [n for n, _ in named_params]
    missing = [n for n in names if n not in blobs]
    extra = [n for n in blobs if n not in set(names)]
    if missing or extra:
        raise FormatError(f"checkpoint mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, t in named_params:
        arr = blobs[name]
        if arr.shape != t.data.shape:
            raise FormatError(f"{name}: shape {arr.shape} vs model {t.data.shape}")
        t.data[...] = arr


def quantize_params(named_params) -> None:
    """Round-trip tensors through f32 so in-memory state equals the saved file."""
    for _, t in named_params:
        t.data[...] = t.data.astype("<f4").astype(np.float64)


def write_feature(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        _write_array(fh, np.asarray(arr))


def read_feature(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != FEATURE_MAGIC:
            raise FormatError(f"{path}: not a feature file")
        return _read_array(fh)


def ensure_parent(path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)

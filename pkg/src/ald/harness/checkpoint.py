"""Flat binary checkpoints of named float64 tensors.

Each record is, in little-endian order: ``u32`` name length, the UTF-8
name, ``u32`` rank, ``rank`` x ``u64`` dimensions, then the values as
``f64``.  Records follow one another until end of file; there is no header.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for name, value in tensors.items():
            arr = np.array(value, dtype="<f8", order="C")  # keeps rank-0 tensors rank 0
            key = name.encode("utf-8")
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    out: dict[str, np.ndarray] = {}
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated record at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    while pos < len(raw):
        (klen,) = struct.unpack("<I", take(4))
        name = take(klen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims, dtype=np.uint64)) if rank else 1
        if name in out:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    return out


def model_state(model, encoder=None) -> dict[str, np.ndarray]:
    """Named tensors of a model (prefix ``model.``) and optional encoder (``encoder.``)."""
    state = {f"model.{k}": p.data.copy() for k, p in model.named_parameters()}
    if encoder is not None:
        state.update({f"encoder.{k}": p.data.copy() for k, p in encoder.named_parameters()})
    return state


def restore_state(state: dict[str, np.ndarray], model, encoder=None) -> None:
    model.likelihood.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("model.")})
    if encoder is not None:
        encoder.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("encoder.")})

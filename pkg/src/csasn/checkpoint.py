"""Binary parameter checkpoints.

Layout: the ASCII magic ``CSASN1``, a uint32 record count, then one record per
tensor: uint32 name length, UTF-8 name, uint32 rank, rank x uint32 dims and
the values as little-endian float64 in C order.  All integers are
little-endian.  The model configuration travels in a JSON sidecar
(``<path>.json``) so the architecture can be rebuilt before loading.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .loss import UncertaintyState
from .model import CSASN, ModelConfig

MAGIC = b"CSASN1"
LOG_VAR_KEY = "loss.log_var"


class CheckpointError(ValueError):
    pass


def state_dict(model: CSASN, state: Optional[UncertaintyState] = None) -> dict:
    """Name -> float64 array for parameters, running statistics and log-variances."""
    out = {name: np.asarray(p.data, dtype=np.float64) for name, p in model.named_parameters()}
    for name, stats in model.named_buffers():
        out[f"{name}.running_mean"] = np.asarray(stats.mean, dtype=np.float64)
        out[f"{name}.running_var"] = np.asarray(stats.var, dtype=np.float64)
    if state is not None:
        out[LOG_VAR_KEY] = np.asarray(state.log_var.data, dtype=np.float64)
    return out


def write_tensors(path, tensors: dict) -> None:
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a CSASN1 checkpoint")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        values = struct.unpack_from(fmt, buf, pos)
        pos += size
        return values

    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (length,) = take("<I")
        if pos + length > len(buf):
            raise CheckpointError(f"{path}: truncated name at byte {pos}")
        name = buf[pos:pos + length].decode("utf-8")
        pos += length
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        n = int(np.prod(dims, dtype=np.int64))
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"{path}: truncated values for {name!r}")
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).copy()
        pos += 8 * n
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return tensors


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(path, model: CSASN, state: Optional[UncertaintyState] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_tensors(path, state_dict(model, state))
    sidecar_path(path).write_text(json.dumps({"model": model.config.to_dict()}, indent=2, sort_keys=True) + "\n")


def load_state(model: CSASN, tensors: dict, state: Optional[UncertaintyState] = None) -> None:
    """Copy arrays into ``model`` (and ``state``) in place, checking names and shapes."""
    expected = state_dict(model, state)
    missing = sorted(set(expected) - set(tensors))
    unexpected = sorted(set(tensors) - set(expected) - {LOG_VAR_KEY})
    if missing or unexpected:
        raise CheckpointError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    for name, value in expected.items():
        if tensors[name].shape != value.shape:
            raise CheckpointError(f"{name}: shape {tensors[name].shape} != model {value.shape}")
    for name, p in model.named_parameters():
        p.data = tensors[name].astype(p.data.dtype)
    for name, stats in model.named_buffers():
        stats.mean = tensors[f"{name}.running_mean"].copy()
        stats.var = tensors[f"{name}.running_var"].copy()
    if state is not None:
        state.log_var.data = tensors[LOG_VAR_KEY].astype(state.log_var.data.dtype)


def load_checkpoint(path) -> tuple[CSASN, UncertaintyState]:
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise FileNotFoundError(f"checkpoint config sidecar not found: {side}")
    config = ModelConfig.from_dict(json.loads(side.read_text())["model"])
    tensors = read_tensors(path)
    model = CSASN(config)
    state = UncertaintyState()
    load_state(model, tensors, state if LOG_VAR_KEY in tensors else None)
    model.eval()
    return model, state

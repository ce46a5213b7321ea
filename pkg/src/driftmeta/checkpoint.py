"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"MDA1"
    32 bytes   sha256 digest of the producing configuration
    u32        number of entries
    per entry:
        u16    name length, then the UTF-8 name
        u8     ndim, then ndim x u32 dims
        payload: prod(dims) float64, row-major, little-endian

Optimizer moments are ordinary entries under ``opt_f/`` and ``opt_a/``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import AdamState, Tensor
from .io import write_bytes
from .meta import ModelState
from .taskinfer import EmbeddingParams, InferenceNet

__all__ = [
    "MAGIC",
    "CheckpointError",
    "ConfigMismatchError",
    "save_arrays",
    "load_arrays",
    "state_arrays",
    "restore_state",
    "inference_arrays",
    "restore_inference",
]

MAGIC = b"MDA1"


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def _encode(config_hash: str, arrays: Mapping[str, np.ndarray]) -> bytes:
    digest = bytes.fromhex(config_hash)
    if len(digest) != 32:
        raise CheckpointError("config hash must be a sha256 hex digest")
    out = [MAGIC, digest, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return b"".join(out)


def save_arrays(path, config_hash: str, arrays: Mapping[str, np.ndarray]) -> None:
    write_bytes(path, _encode(config_hash, arrays))


def load_arrays(path, config_hash: str | None = None, force: bool = False) -> dict[str, np.ndarray]:
    """Read a checkpoint; a hash mismatch is an error unless ``force``."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 4
    digest = buf[pos : pos + 32].hex()
    pos += 32
    if config_hash is not None and digest != config_hash and not force:
        raise ConfigMismatchError(f"{path}: checkpoint was written by a different configuration (use --force to override)")
    try:
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last entry")
    return arrays


# -------------------------------------------------------- state conversion


def _adam_arrays(prefix: str, opt: AdamState) -> dict[str, np.ndarray]:
    out = {f"{prefix}/step": np.array([[float(opt.step)]])}
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        out[f"{prefix}/m{i}"] = m
        out[f"{prefix}/v{i}"] = v
    return out


def _restore_adam(arrays: Mapping[str, np.ndarray], prefix: str, opt: AdamState) -> None:
    opt.step = int(arrays[f"{prefix}/step"][0, 0])
    opt.m, opt.v = [], []
    i = 0
    while f"{prefix}/m{i}" in arrays:
        opt.m.append(arrays[f"{prefix}/m{i}"].copy())
        opt.v.append(arrays[f"{prefix}/v{i}"].copy())
        i += 1


def state_arrays(state: ModelState) -> dict[str, np.ndarray]:
    out = {f"forecaster/{k}": p.value for k, p in state.forecaster.params.items()}
    if state.adapters is not None:
        out.update({f"adapters/{k}": p.value for k, p in state.adapters.named_parameters().items()})
    out.update(_adam_arrays("opt_f", state.opt_f))
    out.update(_adam_arrays("opt_a", state.opt_a))
    return out


def _fill(target: Mapping[str, Tensor], arrays: Mapping[str, np.ndarray], prefix: str) -> None:
    for k, p in target.items():
        key = f"{prefix}/{k}"
        if key not in arrays:
            raise CheckpointError(f"missing entry {key!r}")
        if arrays[key].shape != p.shape:
            raise CheckpointError(f"entry {key!r} has shape {arrays[key].shape}, expected {p.shape}")
        p.value = arrays[key].copy()
        p.grad = None


def restore_state(template: ModelState, arrays: Mapping[str, np.ndarray]) -> ModelState:
    """Copy of ``template`` with every parameter and optimizer moment replaced."""
    state = template.copy()
    _fill(state.forecaster.params, arrays, "forecaster")
    if state.adapters is not None:
        _fill(state.adapters.named_parameters(), arrays, "adapters")
    _restore_adam(arrays, "opt_f", state.opt_f)
    _restore_adam(arrays, "opt_a", state.opt_a)
    return state


def inference_arrays(params: EmbeddingParams, net: InferenceNet) -> dict[str, np.ndarray]:
    out = {f"embedding/{k}": p.value for k, p in params.named_parameters().items()}
    out.update({f"inference/{k}": p.value for k, p in net.params.items()})
    return out


def restore_inference(
    params: EmbeddingParams, net: InferenceNet, arrays: Mapping[str, np.ndarray]
) -> tuple[EmbeddingParams, InferenceNet]:
    params, net = params.copy(), net.copy()
    _fill(params.named_parameters(), arrays, "embedding")
    _fill(net.params, arrays, "inference")
    return params, net


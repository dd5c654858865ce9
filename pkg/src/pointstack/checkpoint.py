"""Model checkpoint container.

Little-endian layout::

    magic      4 bytes   b"PSCK"
    version    uint16    1
    reserved   uint16    0
    seed       int64     training seed
    cfg_len    uint32    length of the config echo
    config     cfg_len   UTF-8 JSON (model / train / data configuration)
    count      uint32    number of tensors
    tensors    count x:
        name_len uint16, name (UTF-8)
        dtype    uint8   1 = float32, 2 = float64
        ndim     uint8
        dims     ndim x uint32
        payload  row-major values

Tensor names are dotted attribute paths (``backbone.stages.0.transfer.fc.weight``);
batch-norm running statistics are stored as ``<path>.running_mean`` /
``<path>.running_var``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import Module

MAGIC = b"PSCK"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class CheckpointError(ValueError):
    pass


def model_tensors(model: Module) -> dict[str, np.ndarray]:
    out = {name: p.data for name, p in model.named_parameters()}
    for name, st in model.named_buffers():
        out[f"{name}.running_mean"] = st.running_mean
        out[f"{name}.running_var"] = st.running_var
    return out


def save_checkpoint(path, model: Module, config: dict, seed: int) -> None:
    cfg = json.dumps(config, sort_keys=True).encode()
    chunks = [struct.pack("<4sHHqI", MAGIC, VERSION, 0, seed, len(cfg)), cfg]
    tensors = model_tensors(model)
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode()
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> tuple[dict, int, dict[str, np.ndarray]]:
    """Return ``(config, seed, tensors)``."""
    buf = Path(path).read_bytes()
    head = struct.Struct("<4sHHqI")
    if len(buf) < head.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, _, seed, clen = head.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = head.size
    config = json.loads(buf[off:off + clen].decode())
    off += clen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode()
            off += nlen
            code, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            dims = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            n = int(np.prod(dims)) if dims else 1
            if off + n * dt.itemsize > len(buf):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(dims).astype(dt.newbyteorder("="))
            off += n * dt.itemsize
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated tensor table") from exc
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return config, seed, tensors


def load_into(model: Module, tensors: dict[str, np.ndarray]) -> None:
    expected = model_tensors(model)
    missing = set(expected) - set(tensors)
    extra = set(tensors) - set(expected)
    if missing or extra:
        raise CheckpointError(f"tensor mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name, arr in tensors.items():
        if name in params:
            p = params[name]
            if p.shape != arr.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        else:
            base, _, field = name.rpartition(".")
            setattr(buffers[base], field, arr.copy())

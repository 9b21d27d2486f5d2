"""Versioned binary checkpoints.

Layout (all little-endian):
  magic "NVCK" | u32 version | u32 meta_len | meta JSON (utf-8)
  u32 n_entries | entries...
Entry: u16 path_len | path utf-8 | u8 ndim | u32 dims... | f64 data.
Round-trips exactly: payloads are raw IEEE doubles.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .model import ModelConfig, ModelParams

MAGIC = b"NVCK"
VERSION = 1


def save_checkpoint(params: ModelParams, path, extra_meta: dict | None = None) -> None:
    meta = {"model": params.config.to_dict()}
    if extra_meta:
        meta["extra"] = extra_meta
    named = dict(sorted(params.named().items()))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(named)))
    for name, tensor in named.items():
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        arr = np.ascontiguousarray(tensor.data, dtype="<f8")
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    if bytes(view[:4]) != MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    off = 4
    (version,) = struct.unpack_from("<I", view, off)
    off += 4
    if version != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", view, off)
    off += 4
    meta = json.loads(bytes(view[off:off + meta_len]).decode("utf-8"))
    off += meta_len
    (n_entries,) = struct.unpack_from("<I", view, off)
    off += 4
    entries: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off:off + name_len]).decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", view, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(view, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        entries[name] = arr.astype(np.float64)

    config = ModelConfig(**meta["model"])
    params = ModelParams(config, seed=0)
    named = params.named()
    if set(named) != set(entries):
        missing = set(named) ^ set(entries)
        raise ContractError(f"{path}: parameter set mismatch ({sorted(missing)[:4]}...)")
    for name, tensor in named.items():
        if tensor.data.shape != entries[name].shape:
            raise ContractError(
                f"{path}: shape mismatch for {name}: "
                f"{entries[name].shape} vs {tensor.data.shape}")
        tensor.data = np.ascontiguousarray(entries[name])
    return params, meta.get("extra", {})

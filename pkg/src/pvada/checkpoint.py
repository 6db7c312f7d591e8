"""Versioned binary checkpoint for :class:`ModelParams`.

Byte layout, all integers little-endian::

    magic      6 bytes   b"PVADA1"
    version    uint32    currently 1
    meta_len   uint32    length of the metadata block
    meta       bytes     UTF-8 JSON, sorted keys: {"model": <ModelConfig>, "classes": [...],
                         "bn_momentum": <float>, "extra": {...}}
    count      uint32    number of tensor records
    records    count x:
        name_len  uint16
        name      UTF-8 bytes
        dtype     uint8      0 = float32, 1 = float64
        ndim      uint8
        shape     ndim x uint32
        values    prod(shape) little-endian reals, C order

Learned tensors come first in model order, followed by the normalization
running statistics as ``<norm>.running_mean`` / ``<norm>.running_var``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import CheckpointError
from .model import ModelConfig, ModelParams, init_params
from .tensor import BatchNormState, Tensor

__all__ = ["MAGIC", "VERSION", "save_checkpoint", "load_checkpoint", "dumps", "loads"]

MAGIC = b"PVADA1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def dumps(params: ModelParams, classes: Optional[Sequence[str]] = None, extra: Optional[dict] = None) -> bytes:
    momenta = {s.momentum for s in params.norms.values()} or {0.1}
    if len(momenta) != 1:
        raise ValueError("normalization layers with different momenta cannot be checkpointed")
    meta = {
        "model": params.config.to_dict(),
        "classes": list(classes) if classes is not None else None,
        "bn_momentum": momenta.pop(),
        "extra": extra or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    records = [(name, t.data) for name, t in params.tensors.items()]
    for name, state in params.norms.items():
        records.append((f"{name}.running_mean", state.running_mean))
        records.append((f"{name}.running_var", state.running_var))
    out = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(records))]
    for name, arr in records:
        arr = np.asarray(arr)
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(
                f"{self.source}: truncated {what}, needed {n} bytes, {len(self.raw) - self.pos} left",
                position=f"byte {self.pos}",
            )
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(raw: bytes, source: str = "<bytes>") -> tuple[ModelParams, dict]:
    """Parse checkpoint bytes into ``(params, metadata)``."""
    r = _Reader(raw, source)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}", position="byte 0")
    version, meta_len = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}", position="byte 6")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable metadata block: {exc}", position="byte 14") from None
    config = ModelConfig.from_dict(meta["model"])
    (count,) = r.unpack("<I", "record count")
    arrays = {}
    for _ in range(count):
        start = r.pos
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode("utf-8")
        code, ndim = r.unpack("<BB", "dtype/ndim")
        if code not in _DTYPES:
            raise CheckpointError(f"{source}: tensor {name!r} has unknown dtype code {code}", position=f"byte {start}")
        shape = r.unpack(f"<{ndim}I", "shape")
        dtype = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(r.take(size * dtype.itemsize, f"values of {name!r}"), dtype=dtype)
        arrays[name] = values.reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - r.pos} trailing bytes", position=f"byte {r.pos}")

    momentum = float(meta.get("bn_momentum", 0.1))
    norms, tensors = {}, {}
    for name in list(arrays):
        if name.endswith(".running_mean"):
            base = name[: -len(".running_mean")]
            if f"{base}.running_var" not in arrays:
                raise CheckpointError(f"{source}: {base} has a running mean but no running variance")
            norms[base] = BatchNormState(arrays.pop(name), arrays.pop(f"{base}.running_var"), momentum)
    for name, arr in arrays.items():
        if name.endswith(".running_var"):
            raise CheckpointError(f"{source}: {name} has no matching running mean")
        tensors[name] = Tensor(arr, requires_grad=True)
    _check_layout(config, tensors, norms, source)
    return ModelParams(config, tensors, norms), meta


def _check_layout(config, tensors, norms, source):
    reference = init_params(config, 0)
    expected = {n: t.shape for n, t in reference.tensors.items()}
    found = {n: t.shape for n, t in tensors.items()}
    if expected != found or set(reference.norms) != set(norms):
        missing = sorted(set(expected) - set(found)) + sorted(set(reference.norms) - set(norms))
        unexpected = sorted(set(found) - set(expected)) + sorted(set(norms) - set(reference.norms))
        reshaped = sorted(n for n in set(expected) & set(found) if expected[n] != found[n])
        raise CheckpointError(
            f"{source}: tensors do not match the stored model config "
            f"(missing {missing}, unexpected {unexpected}, wrong shape {reshaped})"
        )


def save_checkpoint(path, params: ModelParams, classes: Optional[Sequence[str]] = None,
                    extra: Optional[dict] = None) -> None:
    Path(path).write_bytes(dumps(params, classes, extra))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    path = Path(path)
    return loads(path.read_bytes(), str(path))

"""Binary checkpoint container.

Layout (little-endian)::

    magic    8 bytes   b"GSAVCKPT"
    version  u32
    step     u64
    meta_len u32, then meta_len bytes of UTF-8 JSON
    count    u32
    count x { name_len u16, name bytes, ndim u8, ndim x u64 dims, prod(dims) x f64 }

Every array is stored as float64; the original dtype of non-float arrays is kept
in ``meta["_dtypes"]`` and restored on load.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .splat import GaussianSet

MAGIC = b"GSAVCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found: int, supported: int):
        super().__init__(f"checkpoint version {found} is newer than supported version {supported}")
        self.found = found
        self.supported = supported


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    step: int = 0
    version: int = FORMAT_VERSION

    def put_set(self, prefix: str, gs: GaussianSet) -> None:
        for name, arr in gs.arrays().items():
            self.arrays[f"{prefix}.{name}"] = arr.copy()

    def get_set(self, prefix: str) -> GaussianSet:
        names = ("means", "log_scales", "quats", "opacity_logits", "sh", "tags")
        try:
            return GaussianSet(**{n: self.arrays[f"{prefix}.{n}"].copy() for n in names})
        except KeyError as e:
            raise CheckpointError(f"checkpoint has no Gaussian set {prefix!r} ({e})") from None


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = dict(ckpt.meta)
    dtypes = {k: str(v.dtype) for k, v in ckpt.arrays.items() if np.asarray(v).dtype != np.float64}
    meta["_dtypes"] = dtypes
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", ckpt.version, ckpt.step),
             struct.pack("<I", len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(ckpt.arrays))]
    for name in sorted(ckpt.arrays):
        arr = np.array(ckpt.arrays[name], dtype="<f8", order="C")  # keeps 0-d shapes
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes at offset {self.pos}, "
                                  f"file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(data)
    magic = r.take(8)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
    version, step = r.unpack("<IQ")
    if version > FORMAT_VERSION:
        raise CheckpointVersionError(version, FORMAT_VERSION)
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint metadata: {e}") from e
    dtypes = meta.pop("_dtypes", {})
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        if name in dtypes:
            arr = arr.astype(dtypes[name])
        arrays[name] = arr
    if r.pos != len(data):
        raise CheckpointError(f"trailing {len(data) - r.pos} bytes after checkpoint payload")
    return Checkpoint(arrays=arrays, meta=meta, step=step, version=version)

"""Named-tensor checkpoints.

Layout (little-endian)::

    "VWI1" | u32 version | u32 count
    count x ( u32 name_len | utf-8 name | u32 rank | u32 dims[rank] | f32 data )
    u32 meta_len | utf-8 JSON {"model_config": ..., "run_config": ..., ...}
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from voxinit.dataio import FormatError

MAGIC = b"VWI1"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    model_config: dict = field(default_factory=dict)
    run_config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = json.dumps({"model_config": ckpt.model_config, "run_config": ckpt.run_config,
                       "extra": ckpt.extra}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.off = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.off)
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = r.off
        n = r.u32("name length")
        try:
            name = r.take(n, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not UTF-8", start + 4) from exc
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}", start)
        rank = r.u32("rank")
        if rank > 16:
            raise FormatError(f"implausible rank {rank}", r.off - 4)
        dims = [r.u32("dims") for _ in range(rank)]
        size = int(np.prod(dims, dtype=np.int64))
        data = r.take(4 * size, f"data of {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)
    meta_len = r.u32("metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("metadata block is not valid JSON", r.off - meta_len) from exc
    if r.off != len(buf):
        raise FormatError(f"{len(buf) - r.off} trailing bytes", r.off)
    return Checkpoint(tensors, meta.get("model_config", {}), meta.get("run_config", {}), meta.get("extra", {}))


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def from_model(model, run_config: dict | None = None, **extra) -> Checkpoint:
    return Checkpoint({n: t.data.astype(np.float32) for n, t in model.params.items()},
                      model.cfg.to_dict(), dict(run_config or {}), extra)

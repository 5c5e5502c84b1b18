"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"DMCK"                     magic
    u32 version
    u32 header_len, header      utf-8 "key = value" lines (model config + run metadata)
    u32 array_count
    per array:
        u16 name_len, name      utf-8, prefixed params/ ema/ adam_m/ adam_v/
        u8 ndim, u32 dims[ndim]
        u64 count, count * f32  element count prefix, then the data
    32 bytes                    sha256 of every preceding byte
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ditmoe.config import ModelConfig, config_from_dict, config_to_dict, format_kv_text, parse_kv_text

MAGIC = b"DMCK"
FORMAT_VERSION = 1
_GROUPS = ("params", "ema", "adam_m", "adam_v")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    rng_state: dict | None = None
    meta: dict[str, str] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _header(ck: Checkpoint) -> bytes:
    values = dict(config_to_dict(ck.config))
    values["run.step"] = str(int(ck.step))
    values["run.rng_state"] = json.dumps(ck.rng_state, sort_keys=True, separators=(",", ":"))
    for k in sorted(ck.meta):
        if "\n" in str(ck.meta[k]) or "#" in str(ck.meta[k]):
            raise CheckpointError(f"metadata value for {k!r} cannot contain newlines or '#'")
        values[f"meta.{k}"] = str(ck.meta[k])
    return format_kv_text(values).encode("utf-8")


def dumps_checkpoint(ck: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ck.version))
    header = _header(ck)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    arrays = [(f"{g}/{name}", arr) for g in _GROUPS for name, arr in getattr(ck, g).items()]
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        a = np.asarray(arr)
        if a.dtype != np.float32:
            if not np.issubdtype(a.dtype, np.floating):
                raise CheckpointError(f"array {name} is not floating point")
            a = a.astype(np.float32)
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(struct.pack("<Q", a.size))
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, ck: Checkpoint) -> None:
    data = dumps_checkpoint(ck)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 4 + 32:
        raise CheckpointError("truncated checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    (hlen,) = r.unpack("<I")
    values = parse_kv_text(r.take(hlen).decode("utf-8"))
    step = int(values.pop("run.step"))
    rng_state = json.loads(values.pop("run.rng_state"))
    meta = {k[5:]: values.pop(k) for k in [k for k in values if k.startswith("meta.")]}
    config = config_from_dict(values)
    groups: dict[str, dict[str, np.ndarray]] = {g: {} for g in _GROUPS}
    (count,) = r.unpack("<I")
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        (size,) = r.unpack("<Q")
        if size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"array {name}: element count does not match shape")
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
        group, _, key = name.partition("/")
        if group not in groups:
            raise CheckpointError(f"unknown array group in {name!r}")
        groups[group][key] = arr
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after arrays")
    return Checkpoint(config=config, step=step, rng_state=rng_state, meta=meta, version=version, **groups)


def load_checkpoint(path) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes())

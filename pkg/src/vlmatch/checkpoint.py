"""Binary checkpoint format (little-endian).

    magic   b"VLMT"
    u32     format version
    u64     config JSON length, then UTF-8 JSON (encoder config, frozen groups, meta)
    u64     record count
    records u32 name length, UTF-8 name "group.param", u32 rank, u64 dims[rank],
            f64 values (row-major)
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .encoders import ModelParams
from .errors import DimensionError, FormatError, VersionError
from .tensor import Tensor

MAGIC = b"VLMT"
VERSION = 1


def encode_checkpoint(params: ModelParams, config: dict) -> bytes:
    meta = dict(config)
    meta["frozen"] = sorted(params.frozen)
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    named = params.named()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(blob)), blob,
             struct.pack("<Q", len(named))]
    for name, t in named:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(params: ModelParams, path, config: dict | None = None) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    data = encode_checkpoint(params, config or {})
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint at byte {self.pos} (need {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> tuple[ModelParams, dict]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, expected {VERSION}")
    (n_json,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(n_json).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint config block: {exc}") from exc
    (n_rec,) = r.unpack("<Q")
    groups: dict[str, dict[str, Tensor]] = {}
    for _ in range(n_rec):
        (n_name,) = r.unpack("<I")
        name = r.take(n_name).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        group, _, pname = name.partition(".")
        groups.setdefault(group, {})[pname] = Tensor(values, requires_grad=True)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after checkpoint records")
    params = ModelParams(groups)
    params.freeze(*meta.get("frozen", []))
    return params, meta


def load_checkpoint(path) -> ModelParams:
    """Load a checkpoint; the config block is attached as ``params.meta``."""
    path = Path(path)
    params, meta = decode_checkpoint(path.read_bytes())
    params.meta = meta
    return params


def load_into(target: ModelParams, source: ModelParams, groups) -> None:
    """Copy ``groups`` from ``source`` into ``target`` after validating every shape."""
    for g in groups:
        if g not in source.groups:
            raise FormatError(f"checkpoint lacks parameter group {g!r}")
        for name, t in target[g].items():
            if name not in source[g]:
                raise FormatError(f"checkpoint lacks parameter {g}.{name}")
            if source[g][name].shape != t.shape:
                raise DimensionError(
                    f"{g}.{name}: checkpoint shape {source[g][name].shape} vs model {t.shape}"
                )
    for g in groups:
        for name, t in target[g].items():
            t.data = source[g][name].data.copy()

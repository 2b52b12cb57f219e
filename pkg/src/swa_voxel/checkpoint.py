"""``SWAC`` checkpoint files.

Layout (little-endian): magic ``SWAC``, u16 version (1), u64 entry count,
then per entry u16 name length, UTF-8 name, u8 rank, rank x u64 dims and
float32 values. Architecture key/values ride along as rank-0 entries named
``meta:<key>=<value>``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .engine import ParamStore

MAGIC = b"SWAC"
VERSION = 1
META_PREFIX = "meta:"


class CheckpointError(ValueError):
    pass


class ArchitectureMismatch(CheckpointError):
    pass


def checkpoint_bytes(store: ParamStore, meta: dict | None = None) -> bytes:
    entries = [(f"{META_PREFIX}{k}={v}", np.zeros(())) for k, v in sorted((meta or {}).items())]
    entries += [(n, v) for n, v in store.items()]
    out = [MAGIC, struct.pack("<HQ", VERSION, len(entries))]
    for name, value in entries:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", value.ndim))
        out.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        out.append(np.asarray(value, dtype="<f4").tobytes(order="C"))
    return b"".join(out)


def parse_checkpoint(buf: bytes) -> tuple[ParamStore, dict]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    try:
        version, count = struct.unpack_from("<HQ", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 14
        store, meta = ParamStore(), {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off); off += 2
            name = buf[off:off + n].decode("utf-8"); off += n
            (rank,) = struct.unpack_from("<B", buf, off); off += 1
            dims = struct.unpack_from(f"<{rank}Q", buf, off); off += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 4 * size > len(buf):
                raise CheckpointError("truncated checkpoint")
            vals = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            if name.startswith(META_PREFIX):
                key, _, value = name[len(META_PREFIX):].partition("=")
                meta[key] = value
            else:
                store.add(name, vals.astype(np.float64))
    except struct.error:
        raise CheckpointError("truncated checkpoint") from None
    if off != len(buf):
        raise CheckpointError(f"trailing bytes in checkpoint ({len(buf) - off})")
    return store, meta


def save_checkpoint(path, store: ParamStore, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(store, meta))


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    return parse_checkpoint(Path(path).read_bytes())


def check_architecture(meta: dict, expected: dict) -> None:
    """Raise :class:`ArchitectureMismatch` naming every key whose value differs."""
    diff = sorted(k for k in set(meta) | set(expected) if str(meta.get(k)) != str(expected.get(k)))
    if diff:
        detail = ", ".join(f"{k}: checkpoint={meta.get(k)!r} config={expected.get(k)!r}" for k in diff)
        raise ArchitectureMismatch(f"architecture mismatch on {detail}")

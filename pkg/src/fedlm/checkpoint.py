"""PHCK binary checkpoint format.

Layout (little-endian)::

    header   "PHCK" | u32 version | u64 round | u64 param_count | u64 crc64
    body     u32 n_entries
             n_entries x (u32 name_len | name utf-8 | u32 rank | rank x u64 dim)
             u32 meta_len | meta (JSON, utf-8)
             param_count x f64 payload, entries in table order

``crc64`` is CRC-64/WE (ECMA-182 polynomial) over the first 24 header bytes
followed by the whole body, so a damaged round field, entry table or metadata
block is caught as well as a damaged payload.
Entries of the main parameter vector keep their names; extra vectors (e.g. the
server velocity) are stored as ``"<group>:<name>"``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import crcmod.predefined
import numpy as np

from fedlm.errors import ConfigError, IntegrityError
from fedlm.tensor import ParamVector

MAGIC = b"PHCK"
VERSION = 1
_HEADER = struct.Struct("<4sIQQQ")
_PREFIX = struct.Struct("<4sIQQ")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")

crc64 = crcmod.predefined.mkCrcFun("crc-64-we")


@dataclass
class Checkpoint:
    round: int
    params: ParamVector
    extras: dict[str, ParamVector] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _entries(params: ParamVector, extras: dict[str, ParamVector] | None):
    for name, arr in params:
        if ":" in name:
            raise ConfigError(f"parameter name {name!r} may not contain ':'")
        yield name, arr
    for group, vec in (extras or {}).items():
        if ":" in group:
            raise ConfigError(f"extra group name {group!r} may not contain ':'")
        for name, arr in vec:
            yield f"{group}:{name}", arr


def encode_checkpoint(
    params: ParamVector, meta: dict | None = None, *, round: int = 0, extras=None
) -> bytes:
    table = []
    payload = []
    count = 0
    entries = list(_entries(params, extras))
    table.append(_U32.pack(len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        table.append(_U32.pack(len(raw)) + raw + _U32.pack(arr.ndim))
        table.extend(_U64.pack(d) for d in arr.shape)
        payload.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        count += arr.size
    meta_raw = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(table) + _U32.pack(len(meta_raw)) + meta_raw + b"".join(payload)
    prefix = _PREFIX.pack(MAGIC, VERSION, int(round), count)
    return prefix + _U64.pack(crc64(prefix + body)) + body


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < _HEADER.size:
        raise IntegrityError(f"{source}: truncated header")
    magic, version, rnd, count, crc = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise IntegrityError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise IntegrityError(f"{source}: unsupported checkpoint version {version}")
    body = memoryview(raw)[_HEADER.size :]
    if crc64(bytes(raw[: _PREFIX.size]) + bytes(body)) != crc:
        raise IntegrityError(f"{source}: CRC-64 mismatch (corrupt or truncated file)")

    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(body):
            raise IntegrityError(f"{source}: truncated body")
        chunk = body[pos : pos + n]
        pos += n
        return chunk

    (n_entries,) = _U32.unpack(take(4))
    table = []
    for _ in range(n_entries):
        (name_len,) = _U32.unpack(take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = _U32.unpack(take(4))
        shape = tuple(_U64.unpack(take(8))[0] for _ in range(rank))
        table.append((name, shape))
    (meta_len,) = _U32.unpack(take(4))
    meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    sizes = [int(np.prod(s, dtype=np.int64)) for _, s in table]
    if sum(sizes) != count:
        raise IntegrityError(f"{source}: entry table disagrees with param_count")
    data = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
    if pos != len(body):
        raise IntegrityError(f"{source}: trailing bytes after payload")

    main, extras, offset = [], {}, 0
    for (name, shape), size in zip(table, sizes):
        arr = data[offset : offset + size].reshape(shape)
        offset += size
        if ":" in name:
            group, sub = name.split(":", 1)
            extras.setdefault(group, []).append((sub, arr))
        else:
            main.append((name, arr))
    return Checkpoint(
        round=rnd,
        params=ParamVector(main),
        extras={g: ParamVector(v) for g, v in extras.items()},
        meta=meta,
    )


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write to a temp file in the same directory, fsync, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_checkpoint(
    params: ParamVector,
    meta: dict | None,
    path: str | Path,
    *,
    round: int = 0,
    extras: dict[str, ParamVector] | None = None,
) -> None:
    atomic_write_bytes(path, encode_checkpoint(params, meta, round=round, extras=extras))


def read_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), str(path))


def describe_checkpoint(path: str | Path) -> dict:
    ckpt = read_checkpoint(path)
    return {
        "path": str(path),
        "version": VERSION,
        "round": ckpt.round,
        "param_count": ckpt.params.total_len
        + sum(v.total_len for v in ckpt.extras.values()),
        "entries": [[n, list(a.shape)] for n, a in ckpt.params],
        "extras": {g: v.total_len for g, v in ckpt.extras.items()},
        "meta_keys": sorted(ckpt.meta),
    }

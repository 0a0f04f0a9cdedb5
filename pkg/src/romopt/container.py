"""Little-endian float64 binary container with a JSON sidecar.

Two layouts share the ``ROMT`` magic:

* version 1 (trajectory): ``u32 n_x, u32 n_t, u32 n_fields`` followed by the
  ``n_t`` times and ``n_fields`` column-major ``n_x x n_t`` blocks;
* version 2 (named blocks): ``n_x = n_t = 0`` and ``n_fields`` records of
  ``u32 name_len, name (utf-8), u32 rows, u32 cols`` + column-major data.

Sidecar JSON lives at ``<path>.json``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ROMT"
TRAJECTORY_VERSION = 1
BLOCKS_VERSION = 2
_HEADER = struct.Struct("<4sIIII")
_U32 = struct.Struct("<I")


class ContainerError(ValueError):
    pass


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _dump_json(path, meta: dict | None):
    if meta is None:
        return
    with open(sidecar_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_sidecar(path) -> dict:
    p = sidecar_path(path)
    if not p.exists():
        return {}
    with open(p) as fh:
        return json.load(fh)


def write_trajectory(path, times, fields, meta: dict | None = None) -> None:
    times = np.ascontiguousarray(times, dtype="<f8")
    fields = [np.asarray(f, dtype="<f8") for f in fields]
    if not fields:
        raise ContainerError("need at least one field")
    n_x, n_t = fields[0].shape
    if n_t != times.size or any(f.shape != (n_x, n_t) for f in fields):
        raise ContainerError("all fields must be n_x x n_t and match the time grid")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, TRAJECTORY_VERSION, n_x, n_t, len(fields)))
        fh.write(times.tobytes())
        for f in fields:
            fh.write(f.tobytes(order="F"))
    _dump_json(path, meta)


def _read_header(buf: bytes):
    if len(buf) < _HEADER.size:
        raise ContainerError("file too short for a ROMT header")
    magic, version, n_x, n_t, n_fields = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    return version, n_x, n_t, n_fields


def read_trajectory(path):
    """Return ``(times, [fields...], meta)``."""
    buf = Path(path).read_bytes()
    version, n_x, n_t, n_fields = _read_header(buf)
    if version != TRAJECTORY_VERSION:
        raise ContainerError(f"expected trajectory layout, found version {version}")
    expected = _HEADER.size + 8 * (n_t + n_fields * n_x * n_t)
    if len(buf) != expected:
        raise ContainerError(f"size mismatch: {len(buf)} bytes, expected {expected}")
    off = _HEADER.size
    times = np.frombuffer(buf, "<f8", n_t, off).copy()
    off += 8 * n_t
    fields = []
    for _ in range(n_fields):
        data = np.frombuffer(buf, "<f8", n_x * n_t, off)
        fields.append(data.reshape((n_x, n_t), order="F").copy())
        off += 8 * n_x * n_t
    return times, fields, read_sidecar(path)


def write_blocks(path, blocks: dict, meta: dict | None = None) -> None:
    """Write named 2-D blocks (vectors are stored as columns)."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, BLOCKS_VERSION, 0, 0, len(blocks)))
        for name, arr in blocks.items():
            arr = np.asarray(arr, dtype="<f8")
            if arr.ndim == 1:
                arr = arr[:, None]
            if arr.ndim != 2:
                raise ContainerError(f"block {name!r} must be 1-D or 2-D")
            raw = name.encode()
            fh.write(_U32.pack(len(raw)) + raw)
            fh.write(_U32.pack(arr.shape[0]) + _U32.pack(arr.shape[1]))
            fh.write(arr.tobytes(order="F"))
    _dump_json(path, meta)


def read_blocks(path):
    """Return ``({name: 2-D array}, meta)``."""
    buf = Path(path).read_bytes()
    version, _, _, n_fields = _read_header(buf)
    if version != BLOCKS_VERSION:
        raise ContainerError(f"expected named-block layout, found version {version}")
    off = _HEADER.size
    blocks = {}
    try:
        for _ in range(n_fields):
            (ln,) = _U32.unpack_from(buf, off)
            off += 4
            name = buf[off:off + ln].decode()
            off += ln
            rows, cols = struct.unpack_from("<II", buf, off)
            off += 8
            data = np.frombuffer(buf, "<f8", rows * cols, off)
            blocks[name] = data.reshape((rows, cols), order="F").copy()
            off += 8 * rows * cols
    except (struct.error, ValueError) as exc:
        raise ContainerError(f"truncated block file: {exc}") from exc
    if off != len(buf):
        raise ContainerError("trailing bytes after last block")
    return blocks, read_sidecar(path)

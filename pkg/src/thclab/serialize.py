"""Binary snapshots, versioned CSV tables and run manifests.

Snapshot layout (all little-endian)::

    offset  size  field
    0       8     magic b"THCSNAP1"
    8       4     ny (int32)
    12      4     nz (int32)
    16      8     t (float64)
    24      4     field order tag, b"PQTS" = psi, q, T, S
    28      ...   4 fields x ny*nz float64, y index fastest
"""

from __future__ import annotations

import hashlib
import json
import math
import struct

import numpy as np

from .grid import Grid
from .operators import State

MAGIC = b"THCSNAP1"
FIELD_TAG = b"PQTS"
HEADER = struct.Struct("<8siid4s")
HEADER_SIZE = HEADER.size  # 28
MAX_NODES = 1 << 26

CSV_VERSION = 1


class SnapshotError(ValueError):
    pass


def write_snapshot(state: State, stream, grid: Grid | None = None) -> int:
    """Write one snapshot; returns the number of bytes written."""
    ny, nz = state.q.shape
    if grid is not None:
        grid.check(*state.fields())
    for f in state.fields():
        if f.shape != (ny, nz):
            raise SnapshotError(f"field shape {f.shape} does not match ({ny}, {nz})")
    n = stream.write(HEADER.pack(MAGIC, ny, nz, float(state.t), FIELD_TAG))
    for f in state.fields():
        n += stream.write(np.ascontiguousarray(f.T, dtype="<f8").tobytes())
    return n


def _read_exact(stream, size: int, offset: int, what: str) -> bytes:
    data = stream.read(size)
    if len(data) != size:
        raise SnapshotError(
            f"truncated snapshot: {what} needs bytes {offset}..{offset + size - 1} "
            f"but the stream ends at byte offset {offset + len(data)}"
        )
    return data


def read_snapshot(stream, grid: Grid | None = None) -> State:
    """Read one snapshot written by write_snapshot.

    The header is validated (magic first) before any buffer sized by the
    header's dimensions is allocated.
    """
    head = _read_exact(stream, HEADER_SIZE, 0, "header")
    if head[:8] != MAGIC:
        raise SnapshotError(f"bad magic {head[:8]!r}, expected {MAGIC!r}")
    _, ny, nz, t, tag = HEADER.unpack(head)
    if tag != FIELD_TAG:
        raise SnapshotError(f"unknown field order tag {tag!r}")
    if ny < 4 or nz < 4 or ny * nz > MAX_NODES:
        raise SnapshotError(f"implausible dimensions ny={ny}, nz={nz}")
    if grid is not None and (ny, nz) != grid.shape:
        raise SnapshotError(f"snapshot is {ny}x{nz}, grid is {grid.ny}x{grid.nz}")
    size = ny * nz * 8
    fields = []
    for k, name in enumerate("psi q T S".split()):
        off = HEADER_SIZE + k * size
        raw = _read_exact(stream, size, off, f"field {name}")
        fields.append(np.frombuffer(raw, dtype="<f8").reshape(nz, ny).T.astype(float))
    return State(*fields, t=t)


def snapshot_bytes(state: State) -> bytes:
    import io

    buf = io.BytesIO()
    write_snapshot(state, buf)
    return buf.getvalue()


# --- CSV --------------------------------------------------------------------

def format_float(x: float) -> str:
    return format(float(x), ".17g")


def write_csv(path, kind: str, columns, rows) -> None:
    """Versioned CSV: a '#' header naming the table kind and version, then a column row."""
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# thclab {kind} v{CSV_VERSION}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(format_float(v) for v in row) + "\n")


def read_csv(path) -> tuple[str, list[str], np.ndarray]:
    with open(path) as fh:
        first = fh.readline().strip()
        if not first.startswith("# thclab "):
            raise ValueError(f"{path}: missing thclab header comment")
        kind, _, ver = first[len("# thclab "):].rpartition(" v")
        if int(ver) != CSV_VERSION:
            raise ValueError(f"{path}: unsupported CSV version {ver}")
        cols = fh.readline().strip().split(",")
        rows = [[float(x) for x in line.split(",")] for line in fh if line.strip()]
    return kind, cols, np.array(rows, dtype=float).reshape(len(rows), len(cols))


# --- manifest ---------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_manifest(path, manifest: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")

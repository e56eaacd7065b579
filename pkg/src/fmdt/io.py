"""Dataset file formats: the binary FMDT1 container and plain CSV."""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .core import Dataset

MAGIC = b"FMDT1\0"


class FormatError(ValueError):
    pass


def write_fmdt(path, ds: Dataset) -> None:
    """Write ``ds`` as FMDT1 (little-endian, float32 payload, row-major)."""
    header = MAGIC + struct.pack("<IIB", ds.n, ds.d, 1 if ds.shape else 0)
    if ds.shape:
        header += struct.pack("<III", *ds.shape)
    payload = np.ascontiguousarray(ds.points, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_fmdt(path, name: str | None = None) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:6] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    try:
        n, d, has_shape = struct.unpack_from("<IIB", raw, 6)
        off = 6 + 9
        shape = None
        if has_shape:
            shape = struct.unpack_from("<III", raw, off)
            off += 12
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    if len(raw) - off != 4 * n * d:
        raise FormatError(f"{path}: expected {n * d} values, found {(len(raw) - off) // 4}")
    pts = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off).astype(np.float64)
    return Dataset(pts.reshape(n, d), name=name or Path(path).stem, shape=shape)


def read_csv(path, name: str | None = None) -> Dataset:
    """One sample per row; a non-numeric first row is treated as a header."""
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                if i == 0 and not rows:
                    continue
                raise FormatError(f"{path}: non-numeric value on line {i + 1}")
    if not rows or len({len(r) for r in rows}) != 1:
        raise FormatError(f"{path}: rows must be non-empty and of equal length")
    return Dataset(np.array(rows), name=name or Path(path).stem)


def write_csv(path, rows: np.ndarray, header: list[str] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(header)
        for r in np.atleast_2d(rows):
            w.writerow([repr(float(v)) for v in r])


def load_dataset(path, name: str | None = None) -> Dataset:
    """Dispatch on content: FMDT1 magic, otherwise CSV."""
    with open(path, "rb") as fh:
        head = fh.read(6)
    if head == MAGIC:
        return read_fmdt(path, name)
    return read_csv(path, name)

"""Atomic file writes and the binary embedding-matrix format."""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

_MATRIX_HEADER = struct.Struct("<II")


class FormatError(ValueError):
    pass


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def matrix_bytes(matrix: np.ndarray) -> bytes:
    """Serialize an ``n x dim`` matrix: u32 n, u32 dim, then row-major little-endian f32."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise FormatError("expected a 2-d matrix")
    n, dim = matrix.shape
    return _MATRIX_HEADER.pack(n, dim) + np.ascontiguousarray(matrix, dtype="<f4").tobytes()


def write_matrix(path: str | Path, matrix: np.ndarray) -> None:
    atomic_write_bytes(path, matrix_bytes(matrix))


def read_matrix(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _MATRIX_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    n, dim = _MATRIX_HEADER.unpack_from(raw)
    expected = _MATRIX_HEADER.size + 4 * n * dim
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=_MATRIX_HEADER.size).reshape(n, dim).astype(np.float32)

"""CSR sparse matrices shared by every graph in the pipeline.

The on-disk form is the ``BRSG`` binary: a little-endian header
(magic ``BRSG``, u32 version, u64 rows, u64 cols, u64 nnz) followed by
the raw row_ptr (u64), col_idx (u64), and value (f32) arrays. A loaded
graph writes back bit-for-bit identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, FormatError

MAGIC = b"BRSG"
VERSION = 1
_HEADER = struct.Struct("<4sIQQQ")


@dataclass(frozen=True)
class SparseGraph:
    """Weighted CSR matrix with strictly ascending column indices per row."""

    rows: int
    cols: int
    row_ptr: np.ndarray  # int64, rows + 1
    col_idx: np.ndarray  # int64, nnz
    values: np.ndarray   # float32, nnz

    @property
    def nnz(self) -> int:
        return int(self.col_idx.shape[0])

    def validate(self) -> None:
        if self.row_ptr.shape != (self.rows + 1,):
            raise DimensionError("row_ptr length must be rows + 1")
        if self.row_ptr[0] != 0 or self.row_ptr[-1] != self.nnz:
            raise DimensionError("row_ptr must start at 0 and end at nnz")
        if np.any(np.diff(self.row_ptr) < 0):
            raise DimensionError("row_ptr must be nondecreasing")
        if self.nnz:
            if self.col_idx.min() < 0 or self.col_idx.max() >= self.cols:
                raise DimensionError("column index out of bounds")
            if not np.all(np.isfinite(self.values)):
                raise DimensionError("graph weights must be finite")
        for r in range(self.rows):
            lo, hi = self.row_ptr[r], self.row_ptr[r + 1]
            if hi - lo > 1 and np.any(np.diff(self.col_idx[lo:hi]) <= 0):
                raise DimensionError(f"row {r} columns not strictly ascending")

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.row_ptr[i], self.row_ptr[i + 1]
        return self.col_idx[lo:hi], self.values[lo:hi]

    def to_scipy(self, dtype=np.float64) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values.astype(dtype), self.col_idx.copy(), self.row_ptr.copy()),
            shape=(self.rows, self.cols),
        )

    @classmethod
    def from_scipy(cls, mat) -> "SparseGraph":
        csr = sp.csr_matrix(mat)
        csr.sum_duplicates()
        csr.sort_indices()
        csr.eliminate_zeros()
        return cls(
            rows=csr.shape[0],
            cols=csr.shape[1],
            row_ptr=csr.indptr.astype(np.int64),
            col_idx=csr.indices.astype(np.int64),
            values=csr.data.astype(np.float32),
        )

    @classmethod
    def from_rows(cls, rows: int, cols: int, entries) -> "SparseGraph":
        """Build from an iterable of (col_array, val_array) pairs, one per row.

        Columns within a row must already be strictly ascending.
        """
        ptr = np.zeros(rows + 1, dtype=np.int64)
        col_parts, val_parts = [], []
        count = 0
        for r, (c, v) in enumerate(entries):
            ptr[r + 1] = ptr[r] + len(c)
            col_parts.append(np.asarray(c, dtype=np.int64))
            val_parts.append(np.asarray(v, dtype=np.float32))
            count = r + 1
        if count != rows:
            raise DimensionError(f"expected {rows} rows, got {count}")
        col_idx = np.concatenate(col_parts) if col_parts else np.zeros(0, np.int64)
        values = np.concatenate(val_parts) if val_parts else np.zeros(0, np.float32)
        return cls(rows=rows, cols=cols, row_ptr=ptr, col_idx=col_idx, values=values)

    @classmethod
    def empty(cls, rows: int, cols: int) -> "SparseGraph":
        return cls(
            rows=rows,
            cols=cols,
            row_ptr=np.zeros(rows + 1, dtype=np.int64),
            col_idx=np.zeros(0, dtype=np.int64),
            values=np.zeros(0, dtype=np.float32),
        )

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, self.rows, self.cols, self.nnz))
            fh.write(self.row_ptr.astype("<i8").tobytes())
            fh.write(self.col_idx.astype("<i8").tobytes())
            fh.write(self.values.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "SparseGraph":
        path = Path(path)
        raw = path.read_bytes()
        if len(raw) < _HEADER.size:
            raise FormatError(f"{path}: truncated BRSG header")
        magic, version, rows, cols, nnz = _HEADER.unpack_from(raw, 0)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported BRSG version {version}")
        off = _HEADER.size
        need = off + 8 * (rows + 1) + 8 * nnz + 4 * nnz
        if len(raw) != need:
            raise FormatError(f"{path}: expected {need} bytes, found {len(raw)}")
        row_ptr = np.frombuffer(raw, dtype="<i8", count=rows + 1, offset=off).copy()
        off += 8 * (rows + 1)
        col_idx = np.frombuffer(raw, dtype="<i8", count=nnz, offset=off).copy()
        off += 8 * nnz
        values = np.frombuffer(raw, dtype="<f4", count=nnz, offset=off).copy()
        graph = cls(rows=rows, cols=cols, row_ptr=row_ptr, col_idx=col_idx, values=values)
        graph.validate()
        return graph

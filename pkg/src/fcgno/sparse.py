"""CSR matrices, matrix-vector products, energy norms and a reference solver.

The row-wise product itself is delegated to ``scipy.sparse``, which performs
the same fixed-order per-row accumulation a hand-written loop would.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import DidNotConverge, DimensionMismatch, FormatError, NotPositiveDefinite
from .tensor_io import read_tensor, write_tensor


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """Square-or-rectangular sparse matrix in compressed sparse row form."""

    nrows: int
    ncols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        row_ptr = np.ascontiguousarray(self.row_ptr, dtype=np.int64)
        col_idx = np.ascontiguousarray(self.col_idx, dtype=np.int64)
        vals = np.ascontiguousarray(self.vals, dtype=np.float64)
        for arr in (row_ptr, col_idx, vals):
            arr.setflags(write=False)
        object.__setattr__(self, "row_ptr", row_ptr)
        object.__setattr__(self, "col_idx", col_idx)
        object.__setattr__(self, "vals", vals)
        if row_ptr.shape != (self.nrows + 1,):
            raise FormatError("row_ptr must have length nrows + 1")
        if row_ptr[0] != 0 or row_ptr[-1] != len(vals) or len(col_idx) != len(vals):
            raise FormatError("row_ptr does not match the number of stored entries")
        if np.any(np.diff(row_ptr) < 0):
            raise FormatError("row_ptr must be nondecreasing")
        if len(col_idx):
            if col_idx.min() < 0 or col_idx.max() >= self.ncols:
                raise FormatError("column index out of range")
            # strictly increasing within a row: a decrease is only allowed at row starts
            steps = np.diff(col_idx)
            starts = np.zeros(len(col_idx), dtype=bool)
            starts[row_ptr[1:-1][row_ptr[1:-1] < len(col_idx)]] = True
            if np.any((steps <= 0) & ~starts[1:]):
                raise FormatError("column indices must be strictly increasing within each row")

    @classmethod
    def from_scipy(cls, mat) -> "CsrMatrix":
        m = sp.csr_matrix(mat)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)

    @classmethod
    def from_dense(cls, dense) -> "CsrMatrix":
        return cls.from_scipy(sp.csr_matrix(np.asarray(dense, dtype=np.float64)))

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    @classmethod
    def diag(cls, values) -> "CsrMatrix":
        values = np.asarray(values, dtype=np.float64)
        n = len(values)
        return cls(n, n, np.arange(n + 1), np.arange(n), values)

    @cached_property
    def scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.vals, self.col_idx, self.row_ptr), shape=(self.nrows, self.ncols)
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def nnz(self) -> int:
        return len(self.vals)

    def to_dense(self) -> np.ndarray:
        return self.scipy.toarray()

    @cached_property
    def diagonal(self) -> np.ndarray:
        d = self.scipy.diagonal().copy()
        d.setflags(write=False)
        return d

    def transpose(self) -> "CsrMatrix":
        return CsrMatrix.from_scipy(self.scipy.T.tocsr())

    def lower(self) -> "CsrMatrix":
        """Lower triangle including the diagonal."""
        return CsrMatrix.from_scipy(sp.tril(self.scipy, format="csr"))

    def upper(self) -> "CsrMatrix":
        """Upper triangle including the diagonal."""
        return CsrMatrix.from_scipy(sp.triu(self.scipy, format="csr"))

    def row_sums_abs(self) -> np.ndarray:
        return np.asarray(abs(self.scipy).sum(axis=1)).ravel()

    def inf_norm(self) -> float:
        return float(self.row_sums_abs().max()) if self.nrows else 0.0

    def is_symmetric(self) -> bool:
        """Bitwise symmetry of pattern and values."""
        t = self.transpose()
        return (
            np.array_equal(self.row_ptr, t.row_ptr)
            and np.array_equal(self.col_idx, t.col_idx)
            and np.array_equal(self.vals, t.vals)
        )

    def save(self, directory: str | os.PathLike, prefix: str) -> dict:
        directory = os.fspath(directory)
        files = {
            "row_ptr": f"{prefix}_row_ptr.fcgt",
            "col_idx": f"{prefix}_col_idx.fcgt",
            "vals": f"{prefix}_vals.fcgt",
        }
        write_tensor(os.path.join(directory, files["row_ptr"]), self.row_ptr, "u64")
        write_tensor(os.path.join(directory, files["col_idx"]), self.col_idx, "u64")
        write_tensor(os.path.join(directory, files["vals"]), self.vals, "f64")
        return {"nrows": self.nrows, "ncols": self.ncols, "files": files}

    @classmethod
    def load(cls, directory: str | os.PathLike, entry: dict) -> "CsrMatrix":
        files = entry["files"]
        return cls(
            int(entry["nrows"]),
            int(entry["ncols"]),
            read_tensor(os.path.join(directory, files["row_ptr"]), "u64"),
            read_tensor(os.path.join(directory, files["col_idx"]), "u64"),
            read_tensor(os.path.join(directory, files["vals"]), "f64"),
        )


def spmv(A: CsrMatrix, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (A.ncols,):
        raise DimensionMismatch(f"matrix has {A.ncols} columns, vector has shape {x.shape}")
    return A.scipy @ x


def a_norm(A: CsrMatrix, v) -> float:
    """Energy norm sqrt(v^T A v); tiny negative quadratic forms are clamped."""
    v = np.asarray(v, dtype=np.float64)
    q = float(v @ spmv(A, v))
    if q < 0.0:
        if q < -1e-10 * float(v @ v) * A.inf_norm():
            raise NotPositiveDefinite(f"v^T A v = {q:.3e} < 0")
        q = 0.0
    return float(np.sqrt(q))


def reference_solve(A: CsrMatrix, f, tol: float = 1e-13, x0=None) -> np.ndarray:
    """High-accuracy CG solve used offline to produce exact errors.

    The true residual is re-checked whenever the recurrence claims convergence
    and CG restarts from the current iterate if the two disagree.  ``x0``
    is only a warm start; the result does not depend on it beyond rounding.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (A.nrows,):
        raise DimensionMismatch(f"matrix has {A.nrows} rows, rhs has shape {f.shape}")
    fnorm = np.linalg.norm(f)
    if fnorm == 0.0:
        return np.zeros_like(f)
    cap = 50 * A.nrows
    u = np.zeros_like(f) if x0 is None else np.array(x0, dtype=np.float64)
    r = f - A.scipy @ u
    target = tol * fnorm
    it = 0
    while np.linalg.norm(r) > target:
        # inner CG run on the current residual
        p = r.copy()
        rr = r @ r
        while np.sqrt(rr) > 0.5 * target and it < cap:
            s = A.scipy @ p
            ps = p @ s
            if ps <= 0.0:
                raise DidNotConverge(f"nonpositive curvature {ps:.3e}; matrix not SPD?")
            alpha = rr / ps
            u += alpha * p
            r -= alpha * s
            rr_new = r @ r
            p = r + (rr_new / rr) * p
            rr = rr_new
            it += 1
        r = f - A.scipy @ u
        if it >= cap and np.linalg.norm(r) > target:
            raise DidNotConverge(
                f"residual {np.linalg.norm(r) / fnorm:.3e} after {it} iterations (cap {cap})"
            )
    return u

"""Classical preconditioners: Jacobi, symmetric Gauss-Seidel and threshold ILU.

Every preconditioner is a callable ``r -> w`` so it plugs straight into
:func:`fcgno.krylov.fcg`.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular

from .errors import DimensionMismatch, ZeroDiagonal, ZeroPivot
from .sparse import CsrMatrix, reference_solve


def _as_rhs(r, n: int) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (n,):
        raise DimensionMismatch(f"expected a vector of length {n}, got shape {r.shape}")
    return r


def _nonzero_diagonal(A: CsrMatrix) -> np.ndarray:
    d = A.diagonal
    bad = np.flatnonzero(d == 0)
    if bad.size:
        raise ZeroDiagonal(f"zero diagonal entry in row {bad[0]}")
    return d


class Identity:
    name = "identity"

    def __call__(self, r):
        return np.array(r, dtype=np.float64)


class ExactSolve:
    """B(r) = A^{-1} r via the high-accuracy reference solver."""

    name = "exact"

    def __init__(self, A: CsrMatrix):
        self.A = A

    def __call__(self, r):
        return reference_solve(self.A, r)


class Jacobi:
    """k Jacobi sweeps on A x = r starting from x = 0."""

    def __init__(self, A: CsrMatrix, k: int = 1):
        if k < 1:
            raise ValueError("sweep count must be at least 1")
        self.A = A
        self.k = k
        self.inv_diag = 1.0 / _nonzero_diagonal(A)
        self.name = f"Jacobi({k})"

    def __call__(self, r):
        r = _as_rhs(r, self.A.nrows)
        M = self.A.scipy
        x = self.inv_diag * r
        for _ in range(self.k - 1):
            x = x + self.inv_diag * (r - M @ x)
        return x


class SymmetricGaussSeidel:
    """k symmetric sweeps: a forward sweep with the lower triangle then a backward one."""

    def __init__(self, A: CsrMatrix, k: int = 1):
        if k < 1:
            raise ValueError("sweep count must be at least 1")
        _nonzero_diagonal(A)
        self.A = A
        self.k = k
        self.lower = sp.tril(A.scipy, format="csr")
        self.upper = sp.triu(A.scipy, format="csr")
        self.name = f"GS({k})"

    def __call__(self, r):
        r = _as_rhs(r, self.A.nrows)
        M = self.A.scipy
        x = np.zeros_like(r)
        for _ in range(self.k):
            x = x + spsolve_triangular(self.lower, r - M @ x, lower=True)
            x = x + spsolve_triangular(self.upper, r - M @ x, lower=False)
        return x


def jacobi_apply(P: Jacobi, r) -> np.ndarray:
    return P(r)


def sgs_apply(P: SymmetricGaussSeidel, r) -> np.ndarray:
    return P(r)


@dataclass(frozen=True, eq=False)
class IluPrecond:
    """Incomplete factors A ~ L U with unit lower L (diagonal not stored) and U."""

    L: CsrMatrix
    U: CsrMatrix
    fill_factor: float
    drop_tol: float

    @property
    def nnz(self) -> int:
        return self.L.nnz + self.U.nnz

    def __call__(self, r):
        return ilu_apply(self, r)

    @property
    def name(self) -> str:
        return f"ILU({self.fill_factor:g})"


def _keep_largest(entries: dict, cap: int) -> dict:
    if len(entries) <= cap:
        return entries
    if cap <= 0:
        return {}
    top = heapq.nlargest(cap, entries.items(), key=lambda kv: abs(kv[1]))
    return dict(top)


def ilu_factor(A: CsrMatrix, fill_factor: float = 1.0, drop_tol: float = 1e-4) -> IluPrecond:
    """Row-wise threshold ILU without pivoting.

    In row i, entries of the working row smaller than drop_tol times the
    2-norm of A's row i are dropped (lower entries are tested before the
    division by the pivot).  The strict lower and strict upper parts
    then keep at most floor(fill_factor * c) entries each, where c is the
    number of entries A itself has in that part of row i.  Together with the
    diagonal this gives nnz(L) + nnz(U) <= fill_factor * nnz(A) + n.
    """
    if fill_factor < 1:
        raise ValueError("fill_factor must be >= 1")
    if drop_tol < 0:
        raise ValueError("drop_tol must be >= 0")
    n = A.nrows
    if A.ncols != n:
        raise DimensionMismatch("ILU needs a square matrix")
    rp, ci, va = A.row_ptr, A.col_idx, A.vals
    u_rows: list[tuple[np.ndarray, np.ndarray]] = []  # strict upper part of U, per row
    u_diag = np.zeros(n)
    l_rows: list[tuple[np.ndarray, np.ndarray]] = []
    for i in range(n):
        cols = ci[rp[i]:rp[i + 1]].tolist()
        vals = va[rp[i]:rp[i + 1]].tolist()
        tau = drop_tol * math.sqrt(sum(v * v for v in vals))
        n_low = sum(1 for c in cols if c < i)
        n_up = sum(1 for c in cols if c > i)
        w = dict(zip(cols, vals))
        heap = [c for c in cols if c < i]
        heapq.heapify(heap)
        lower: dict[int, float] = {}
        while heap:
            k = heapq.heappop(heap)
            raw = w.pop(k)
            # test the entry before scaling by the pivot so that both
            # triangles are compared against the same row-norm threshold
            if abs(raw) < tau:
                continue
            wk = raw / u_diag[k]
            lower[k] = wk
            ucols, uvals = u_rows[k]
            for j, ukj in zip(ucols.tolist(), uvals.tolist()):
                if j in w:
                    w[j] -= wk * ukj
                else:
                    w[j] = -wk * ukj
                    if j < i:
                        heapq.heappush(heap, j)
        diag = w.pop(i, 0.0)
        if diag == 0.0 or not math.isfinite(diag):
            raise ZeroPivot(f"zero pivot in row {i}; try a smaller drop_tol")
        upper = {j: v for j, v in w.items() if abs(v) >= tau}
        lower = _keep_largest(lower, math.floor(fill_factor * n_low))
        upper = _keep_largest(upper, math.floor(fill_factor * n_up))
        lc = np.array(sorted(lower), dtype=np.int64)
        uc = np.array(sorted(upper), dtype=np.int64)
        l_rows.append((lc, np.array([lower[c] for c in lc.tolist()])))
        u_rows.append((uc, np.array([upper[c] for c in uc.tolist()])))
        u_diag[i] = diag
    L = _rows_to_csr(n, l_rows)
    U = _rows_to_csr(n, [
        (np.concatenate([[i], c]), np.concatenate([[u_diag[i]], v]))
        for i, (c, v) in enumerate(u_rows)
    ])
    return IluPrecond(L, U, float(fill_factor), float(drop_tol))


def _rows_to_csr(n: int, rows) -> CsrMatrix:
    counts = np.array([len(c) for c, _ in rows], dtype=np.int64)
    row_ptr = np.concatenate([[0], np.cumsum(counts)])
    col_idx = np.concatenate([c for c, _ in rows]) if n else np.zeros(0)
    vals = np.concatenate([v for _, v in rows]) if n else np.zeros(0)
    return CsrMatrix(n, n, row_ptr, col_idx.astype(np.int64), vals.astype(np.float64))


def ilu_apply(P: IluPrecond, r) -> np.ndarray:
    """Solve L y = r (unit diagonal) then U w = y."""
    r = _as_rhs(r, P.U.nrows)
    if np.any(P.U.diagonal == 0):
        raise ZeroPivot("U has a zero diagonal entry")
    y = spsolve_triangular(P.L.scipy, r, lower=True, unit_diagonal=True)
    return spsolve_triangular(P.U.scipy, y, lower=False)


class Ilu:
    """Callable wrapper building the incomplete factors once."""

    def __init__(self, A: CsrMatrix, fill_factor: float = 1.0, drop_tol: float = 1e-4):
        self.factors = ilu_factor(A, fill_factor, drop_tol)
        self.name = f"ILU({fill_factor:g})"

    def __call__(self, r):
        return ilu_apply(self.factors, r)


def build_classical(name: str, A: CsrMatrix):
    """Construct a baseline from a short label such as ``Jacobi(4)`` or ``ILU(8)``."""
    label = name.strip()
    if label.lower() in ("cg", "identity", "none"):
        return Identity()
    head, _, arg = label.partition("(")
    arg = arg.rstrip(")")
    head = head.strip().lower()
    if head == "jacobi":
        return Jacobi(A, int(arg or 1))
    if head in ("gs", "sgs"):
        return SymmetricGaussSeidel(A, int(arg or 1))
    if head in ("ilu", "ilut"):
        return Ilu(A, float(arg or 1))
    raise ValueError(f"unknown preconditioner {name!r}")

"""Conjugate gradients, flexible CG with truncated orthogonalization, diagnostics."""

from __future__ import annotations

import csv
import math
import os
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .errors import BreakdownZeroCurvature, DimensionMismatch, NonFinitePreconditioner
from .sparse import CsrMatrix, a_norm


class Preconditioner(Protocol):
    """Any deterministic map from a residual to a correction of the same size."""

    def __call__(self, r: np.ndarray) -> np.ndarray: ...


@dataclass
class ConvergenceRecord:
    """Per-iteration history of one solve; entry i describes iterate u_i."""

    rel_residual: list[float] = field(default_factory=list)
    a_norm_error: list[float] = field(default_factory=list)
    epsilon: list[float] = field(default_factory=list)
    ms: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rel_residual)

    @property
    def iterations(self) -> int:
        return len(self.rel_residual) - 1

    def append(self, rel_residual, a_norm_error=math.nan, epsilon=math.nan, ms=0.0):
        self.rel_residual.append(float(rel_residual))
        self.a_norm_error.append(float(a_norm_error))
        self.epsilon.append(float(epsilon))
        self.ms.append(float(ms))

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "rel_residual", "a_norm_error", "epsilon", "ms"])
            for i, row in enumerate(zip(self.rel_residual, self.a_norm_error, self.epsilon, self.ms)):
                w.writerow([i, *(repr(v) for v in row)])

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "ConvergenceRecord":
        rec = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rec.append(float(row["rel_residual"]), float(row["a_norm_error"]),
                           float(row["epsilon"]), float(row["ms"]))
        return rec


def m_schedule(i: int, m_max: int) -> int:
    """Number of previous directions to orthogonalize against at step i."""
    return min(i, max(1, i % (m_max + 1)))


def iterations_to_threshold(record: ConvergenceRecord, tau: float) -> int | None:
    """First iteration index with relative residual at or below tau, else None."""
    for i, v in enumerate(record.rel_residual):
        if v <= tau:
            return i
    return None


def _initial_guess(f: np.ndarray, u0, seed) -> np.ndarray:
    if u0 is None:
        return np.random.default_rng(seed).standard_normal(f.shape)
    u0 = np.array(u0, dtype=np.float64)
    if u0.shape != f.shape:
        raise DimensionMismatch(f"u0 has shape {u0.shape}, rhs has shape {f.shape}")
    return u0


def _check(A: CsrMatrix, f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if A.nrows != A.ncols or f.shape != (A.nrows,):
        raise DimensionMismatch(f"matrix {A.shape} incompatible with rhs {f.shape}")
    return f


def _diagnostics(A, u, u_exact, w=None):
    """A-norm error of u and, if w is given, the relative deviation of w from e."""
    if u_exact is None:
        return math.nan, math.nan
    e = u_exact - u
    ne = a_norm(A, e)
    if w is None:
        return ne, math.nan
    eps = a_norm(A, w - e) / ne if ne > 0 else math.nan
    return ne, eps


def fcg(
    A: CsrMatrix,
    f,
    B: Preconditioner | None = None,
    u0=None,
    m_max: int = 20,
    tol: float = 1e-6,
    max_iter: int = 1000,
    u_exact=None,
    seed: int | None = 0,
    callback: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
) -> tuple[np.ndarray, ConvergenceRecord]:
    """Flexible conjugate gradients with a possibly nonlinear preconditioner B.

    Each new direction is A-orthogonalized against the last m_i stored
    directions, where m_i follows :func:`m_schedule`.  The schedule gives
    m_0 = 0 and drops back to a single direction every m_max + 1 steps.
    When ``u_exact`` is given the record holds the A-norm error of every
    iterate and epsilon_i = ||B(r_i) - e_i||_A / ||e_i||_A.
    """
    if m_max < 1:
        raise ValueError("m_max must be at least 1")
    f = _check(A, f)
    M = A.scipy
    u = _initial_guess(f, u0, seed)
    if u_exact is not None:
        u_exact = np.asarray(u_exact, dtype=np.float64)
    r = f - M @ u
    r0 = np.linalg.norm(r)
    rec = ConvergenceRecord()
    history: deque = deque(maxlen=m_max)  # (p_k, s_k, <p_k, s_k>)
    if r0 == 0.0:
        rec.append(0.0, *_diagnostics(A, u, u_exact))
        return u, rec
    rel = 1.0
    i = 0
    t = time.perf_counter()
    while True:
        if rel <= tol or i >= max_iter:
            rec.append(rel, *_diagnostics(A, u, u_exact), ms=0.0)
            break
        w = r.copy() if B is None else np.asarray(B(r), dtype=np.float64)
        if w.shape != r.shape:
            raise DimensionMismatch(f"preconditioner returned shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise NonFinitePreconditioner(f"non-finite preconditioner output at iteration {i}")
        ne, eps = _diagnostics(A, u, u_exact, w)
        p = w.copy()
        m_i = m_schedule(i, m_max)
        if m_i:
            for pk, sk, psk in list(history)[-m_i:]:
                p -= ((w @ sk) / psk) * pk
        s = M @ p
        ps = float(p @ s)
        if not ps > 0.0:
            raise BreakdownZeroCurvature(f"<p, Ap> = {ps:.3e} at iteration {i}")
        alpha = float(p @ r) / ps
        u = u + alpha * p
        r = r - alpha * s
        history.append((p, s, ps))
        now = time.perf_counter()
        rec.append(rel, ne, eps, ms=1e3 * (now - t))
        t = now
        rel = float(np.linalg.norm(r) / r0)
        i += 1
        if callback is not None:
            callback(i, u, r)
    return u, rec


def cg(
    A: CsrMatrix,
    f,
    u0=None,
    tol: float = 1e-6,
    max_iter: int = 1000,
    u_exact=None,
    seed: int | None = 0,
    callback: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
) -> tuple[np.ndarray, ConvergenceRecord]:
    """Unpreconditioned conjugate gradients.

    The record mirrors :func:`fcg` with B = I, so epsilon_i compares the
    residual itself with the exact error.
    """
    f = _check(A, f)
    M = A.scipy
    u = _initial_guess(f, u0, seed)
    if u_exact is not None:
        u_exact = np.asarray(u_exact, dtype=np.float64)
    r = f - M @ u
    r0 = np.linalg.norm(r)
    rec = ConvergenceRecord()
    if r0 == 0.0:
        rec.append(0.0, *_diagnostics(A, u, u_exact))
        return u, rec
    p = r.copy()
    rr = float(r @ r)
    rel = 1.0
    i = 0
    t = time.perf_counter()
    while True:
        if rel <= tol or i >= max_iter:
            rec.append(rel, *_diagnostics(A, u, u_exact))
            break
        ne, eps = _diagnostics(A, u, u_exact, r)
        s = M @ p
        ps = float(p @ s)
        if not ps > 0.0:
            raise BreakdownZeroCurvature(f"<p, Ap> = {ps:.3e} at iteration {i}")
        alpha = rr / ps
        u = u + alpha * p
        r = r - alpha * s
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
        now = time.perf_counter()
        rec.append(rel, ne, eps, ms=1e3 * (now - t))
        t = now
        rel = float(np.sqrt(rr) / r0)
        i += 1
        if callback is not None:
            callback(i, u, r)
    return u, rec

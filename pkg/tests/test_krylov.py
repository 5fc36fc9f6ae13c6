import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fcgno.errors import BreakdownZeroCurvature, NonFinitePreconditioner
from fcgno.krylov import ConvergenceRecord, cg, fcg, iterations_to_threshold, m_schedule
from fcgno.precond import ExactSolve, Identity, Jacobi, SymmetricGaussSeidel
from fcgno.problems import GridDescriptor, make_diffusion_instance, make_poisson_instance
from fcgno.sparse import CsrMatrix, reference_solve


def test_cg_identity_one_step():
    f = np.random.default_rng(99).standard_normal(10)
    u, rec = cg(CsrMatrix.identity(10), f, tol=1e-12, seed=0)
    assert rec.iterations == 1
    assert np.allclose(u, f)


def test_cg_two_eigenvalues():
    u, rec = cg(CsrMatrix.diag([1.0, 4.0]), np.ones(2), u0=np.zeros(2), tol=1e-14)
    assert rec.iterations <= 2
    assert np.allclose(u, [1.0, 0.25], atol=1e-14)


def test_cg_poisson_32_iterations():
    grid = GridDescriptor(32)
    counts = []
    for s in range(20):
        p = make_poisson_instance(grid, s)
        _, rec = cg(p.matrix, p.rhs, tol=1e-6, max_iter=500, seed=s)
        counts.append(iterations_to_threshold(rec, 1e-6))
    assert 59 <= np.median(counts) <= 92


def test_cg_breakdown_on_indefinite():
    with pytest.raises(BreakdownZeroCurvature):
        cg(CsrMatrix.diag([1.0, -1.0]), np.array([0.0, 1.0]), u0=np.zeros(2))


def test_fcg_exact_preconditioner():
    p = make_diffusion_instance(GridDescriptor(16), 2)
    _, rec = fcg(p.matrix, p.rhs, ExactSolve(p.matrix), tol=1e-6)
    assert rec.iterations == 1


def test_fcg_identity_full_memory_matches_cg():
    p = make_poisson_instance(GridDescriptor(15), 3)
    uc, ucg, uf = [], [], []
    cg(p.matrix, p.rhs, tol=0, max_iter=40, seed=1, callback=lambda i, u, r: ucg.append(u.copy()))
    fcg(p.matrix, p.rhs, Identity(), m_max=40, tol=0, max_iter=40, seed=1,
        callback=lambda i, u, r: uf.append(u.copy()))
    for a, b in zip(ucg, uf):
        assert np.linalg.norm(a - b) <= 1e-10 * np.linalg.norm(a)


def test_fcg_a_norm_monotone():
    for kind, B in (("poisson", Identity), ("diffusion", SymmetricGaussSeidel)):
        p = (make_poisson_instance if kind == "poisson" else make_diffusion_instance)(GridDescriptor(31), 1)
        ue = reference_solve(p.matrix, p.rhs)
        _, rec = fcg(p.matrix, p.rhs, B() if B is Identity else B(p.matrix), tol=1e-10,
                     max_iter=300, u_exact=ue)
        err = np.array(rec.a_norm_error)
        assert np.all(err[1:] <= err[:-1] * (1 + 1e-12))


class _Nonlinear:
    """A deliberately nonlinear map: Jacobi with a residual-dependent damping."""

    def __init__(self, A):
        self.j = Jacobi(A, 2)

    def __call__(self, r):
        w = self.j(r)
        return w * (1.0 + 0.3 * np.tanh(r / (np.abs(r).max() + 1e-300)))


def test_fcg_a_norm_monotone_nonlinear():
    p = make_diffusion_instance(GridDescriptor(20), 9)
    ue = reference_solve(p.matrix, p.rhs)
    _, rec = fcg(p.matrix, p.rhs, _Nonlinear(p.matrix), tol=1e-9, max_iter=400, u_exact=ue)
    err = np.array(rec.a_norm_error)
    assert np.all(err[1:] <= err[:-1] * (1 + 1e-12))
    assert rec.rel_residual[-1] <= 1e-9


def test_cg_residual_orthogonality():
    p = make_poisson_instance(GridDescriptor(15), 0)
    rs = []
    cg(p.matrix, p.rhs, tol=0, max_iter=20, callback=lambda i, u, r: rs.append(r / np.linalg.norm(r)))
    for i in range(len(rs)):
        for j in range(max(0, i - 5), i):
            assert abs(rs[i] @ rs[j]) < 1e-6


def test_m_max_one_with_identity_is_cg():
    """With a fixed SPD preconditioner one stored direction already gives CG."""
    p = make_poisson_instance(GridDescriptor(32), 0)
    _, r1 = fcg(p.matrix, p.rhs, Identity(), m_max=1, tol=1e-6, max_iter=5000)
    _, r20 = fcg(p.matrix, p.rhs, Identity(), m_max=20, tol=1e-6, max_iter=5000)
    i1, i20 = iterations_to_threshold(r1, 1e-6), iterations_to_threshold(r20, 1e-6)
    assert i1 is not None and abs(i1 - i20) <= 2


def test_m_max_one_slower_nonlinear():
    p = make_poisson_instance(GridDescriptor(32), 0)
    _, r1 = fcg(p.matrix, p.rhs, _Nonlinear(p.matrix), m_max=1, tol=1e-6, max_iter=500)
    _, r20 = fcg(p.matrix, p.rhs, _Nonlinear(p.matrix), m_max=20, tol=1e-6, max_iter=500)
    i1, i20 = iterations_to_threshold(r1, 1e-6), iterations_to_threshold(r20, 1e-6)
    assert i20 is not None
    assert i1 is None or i1 > i20


def test_epsilon_below_one_implies_convergence():
    p = make_poisson_instance(GridDescriptor(16), 4)
    ue = reference_solve(p.matrix, p.rhs)
    _, rec = fcg(p.matrix, p.rhs, SymmetricGaussSeidel(p.matrix, 2), tol=1e-8, max_iter=64, u_exact=ue)
    eps = np.array(rec.epsilon[:-1])
    assert np.all(eps < 1)
    assert rec.rel_residual[-1] <= 1e-8


def test_cg_epsilon_exceeds_one():
    p = make_poisson_instance(GridDescriptor(16), 4)
    ue = reference_solve(p.matrix, p.rhs)
    _, rec = cg(p.matrix, p.rhs, tol=1e-6, max_iter=200, u_exact=ue)
    assert np.nanmax(rec.epsilon) > 1


def test_non_finite_preconditioner():
    p = make_poisson_instance(GridDescriptor(4), 0)
    with pytest.raises(NonFinitePreconditioner):
        fcg(p.matrix, p.rhs, lambda r: np.full_like(r, np.nan))


@pytest.mark.parametrize("i,m_max,expected", [(0, 20, 0), (20, 20, 20), (21, 20, 1)])
def test_m_schedule_examples(i, m_max, expected):
    assert m_schedule(i, m_max) == expected


def test_m_schedule_formula_range():
    for m_max in (1, 5, 20):
        for i in range(101):
            assert m_schedule(i, m_max) == min(i, max(1, math.fmod(i, m_max + 1)))


@given(st.integers(0, 10_000), st.integers(1, 50))
def test_m_schedule_bounds(i, m_max):
    m = m_schedule(i, m_max)
    assert 0 <= m <= min(i, m_max)


def test_iterations_to_threshold():
    rec = ConvergenceRecord([1, 0.5, 1e-4, 1e-7])
    assert iterations_to_threshold(rec, 1e-6) == 3
    assert iterations_to_threshold(ConvergenceRecord([1, 0.9, 0.8]), 1e-6) is None


def test_record_csv_roundtrip(tmp_path):
    p = make_poisson_instance(GridDescriptor(8), 0)
    ue = reference_solve(p.matrix, p.rhs)
    _, rec = fcg(p.matrix, p.rhs, Jacobi(p.matrix, 2), tol=1e-8, u_exact=ue)
    rec.to_csv(tmp_path / "r.csv")
    header = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert header == "iter,rel_residual,a_norm_error,epsilon,ms"
    back = ConvergenceRecord.from_csv(tmp_path / "r.csv")
    assert back.rel_residual == rec.rel_residual
    assert back.rel_residual[0] == 1.0
    assert len(back.epsilon) == len(back.ms) == len(back.a_norm_error) == len(back)

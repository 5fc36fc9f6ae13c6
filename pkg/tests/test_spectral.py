import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from fcgno.errors import DimensionMismatch, NonFiniteParameters
from fcgno.problems import GridDescriptor, make_diffusion_instance, make_poisson_instance
from fcgno.spectral import (
    FourierBasis,
    QuadratureBasis,
    SnoPreconditioner,
    as_preconditioner,
    init_params,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
    sno_forward,
    zero_params_like,
)

F64 = torch.float64


def bases():
    return [QuadratureBasis.legendre(12), QuadratureBasis.legendre(16, 10),
            QuadratureBasis.sine(24), QuadratureBasis.sine(33, 20)]


@pytest.mark.parametrize("basis", bases(), ids=["leg12", "leg16x10", "sine24", "sine33x20"])
def test_quadrature_left_inverse(basis):
    c = np.random.default_rng(0).standard_normal(basis.size)
    assert np.abs(basis.analysis(basis.synthesis(c)) - c).max() < 1e-12


@pytest.mark.parametrize("basis", bases(), ids=["leg12", "leg16x10", "sine24", "sine33x20"])
def test_quadrature_adjoint_and_projection(basis):
    rng = np.random.default_rng(1)
    c = rng.standard_normal(basis.size)
    f = rng.standard_normal(len(basis.nodes))
    lhs = basis.inner(basis.synthesis(c), f)
    rhs = c @ (basis.norms * basis.analysis(f))
    assert lhs == pytest.approx(rhs, rel=1e-10)
    once = basis.synthesis(basis.analysis(f))
    twice = basis.synthesis(basis.analysis(once))
    assert np.abs(once - twice).max() < 1e-12


def test_quadrature_2d_roundtrip():
    b = QuadratureBasis.sine(20, 8)
    c = np.random.default_rng(2).standard_normal((8, 8))
    assert np.abs(b.analysis2d(b.synthesis2d(c)) - c).max() < 1e-12


def test_quadrature_constant_is_first_legendre_mode():
    b = QuadratureBasis.legendre(10)
    c = b.analysis(np.ones(10))
    assert c[0] == pytest.approx(1.0, abs=1e-14) and np.abs(c[1:]).max() < 1e-12


def test_sine_synthesis_nests_across_grids():
    c = np.random.default_rng(3).standard_normal((10, 10))
    f31 = QuadratureBasis.sine(31, 10).synthesis2d(c)
    f63 = QuadratureBasis.sine(63, 10).synthesis2d(c)
    assert np.abs(f31 - f63[1::2, 1::2]).max() < 1e-12


def test_fourier_constant_field():
    c = FourierBasis(20).analysis(np.ones((16, 16)))
    assert c[0, 0] == pytest.approx(1.0)
    c[0, 0] = 0
    assert np.abs(c).max() < 1e-14


def test_fourier_pure_mode():
    n = 64
    x = np.arange(n) / n
    field = np.exp(2j * np.pi * 3 * x)[:, None] * np.ones((1, n))
    basis = FourierBasis(20)
    c = basis.analysis(field)
    k1, k2 = basis.modes(n)
    i = int(np.flatnonzero(k1 == 3)[0])
    assert c[i, 0] == pytest.approx(1.0, abs=1e-12)
    c[i, 0] = 0
    assert np.abs(c).max() < 1e-12


def _low_mode_field(n, seed, kmax=5):
    rng = np.random.default_rng(seed)
    x = np.arange(n) / n
    X, Y = np.meshgrid(x, x, indexing="ij")
    f = np.zeros((n, n))
    for k1 in range(-kmax, kmax + 1):
        for k2 in range(kmax + 1):
            a, b = rng.standard_normal(2)
            f += a * np.cos(2 * np.pi * (k1 * X + k2 * Y)) + b * np.sin(2 * np.pi * (k1 * X + k2 * Y))
    return f


def test_fourier_roundtrip_band_limited():
    n = 32
    basis = FourierBasis(20)
    f = _low_mode_field(n, 4)
    c = basis.analysis(f)
    assert np.abs(basis.synthesis(c, n) - f).max() < 1e-12
    assert np.abs(basis.analysis(basis.synthesis(c, n)) - c).max() < 1e-12
    assert np.all(basis.synthesis(np.zeros_like(c), n) == 0)


def test_fourier_synthesis_nests_across_grids():
    basis = FourierBasis(20)
    c = basis.analysis(_low_mode_field(32, 5))
    f32, f64 = basis.synthesis(c, 32), basis.synthesis(c, 64)
    assert np.abs(f32 - f64[::2, ::2]).max() < 1e-12


def test_fourier_too_many_coefficients():
    with pytest.raises(DimensionMismatch):
        FourierBasis(20).synthesis(np.zeros((30, 30)), 16)


@pytest.mark.parametrize("basis", ["sine", "fourier"])
def test_parameter_count(basis):
    p = init_params(32, 20, 4, basis=basis)
    assert p.count() == parameter_count(32, 20, 4, basis=basis)
    if basis == "fourier":
        assert p.count() == 4 * (32**2 * 20**2 * 2 + 32**2 + 32) + (2 * 32 + 32) + (32 + 1)


@pytest.mark.parametrize("basis", ["sine", "fourier"])
def test_zero_params_zero_output(basis):
    p = zero_params_like(init_params(8, 6, basis=basis, dtype=F64))
    out = sno_forward(p, torch.randn(2, 2, 12, 12, dtype=F64))
    assert out.shape == (2, 12, 12) and torch.all(out == 0)


@pytest.mark.parametrize("basis", ["sine", "fourier"])
@given(alpha=st.floats(-50, 50).filter(lambda a: abs(a) > 1e-3), seed=st.integers(0, 100))
def test_linear_without_activation(basis, alpha, seed):
    p = init_params(6, 5, basis=basis, dtype=F64, seed=seed)
    for k in p.tensors:
        if "_b" in k:
            p.tensors[k].zero_()
    x = torch.randn(1, 2, 10, 10, dtype=F64, generator=torch.Generator().manual_seed(seed))
    y = sno_forward(p, x, activation="identity")
    ya = sno_forward(p, alpha * x, activation="identity")
    assert float((ya - alpha * y).abs().max()) <= 1e-10 * abs(alpha) * float(y.abs().max())


def _periodic_inputs(n):
    x = np.arange(n) / n
    X, Y = np.meshgrid(x, x, indexing="ij")
    r = np.cos(2 * np.pi * X) + 0.5 * np.sin(2 * np.pi * (X + 2 * Y))
    return torch.tensor(np.stack([r, np.ones_like(r)]))


def _dirichlet_inputs(n):
    x = np.arange(1, n + 1) / (n + 1)
    X, Y = np.meshgrid(x, x, indexing="ij")
    r = np.sin(np.pi * X) * np.sin(2 * np.pi * Y) + 0.5 * np.sin(3 * np.pi * X) * np.sin(np.pi * Y)
    return torch.tensor(np.stack([r, np.sin(np.pi * X) * np.sin(np.pi * Y)]))


def test_discretization_consistency_fourier():
    p = init_params(32, 20, basis="fourier", dtype=F64, seed=3)
    a = sno_forward(p, _periodic_inputs(32))
    b = sno_forward(p, _periodic_inputs(64))
    assert float((a - b[::2, ::2]).abs().max() / a.abs().max()) < 1e-6


def test_discretization_consistency_sine():
    """Nested grids 31 and 63; constants are not band-limited in a sine basis, so biases are off."""
    p = init_params(32, 20, basis="sine", dtype=F64, seed=3)
    for k in p.tensors:
        if "_b" in k:
            p.tensors[k].zero_()
    a = sno_forward(p, _dirichlet_inputs(31))
    b = sno_forward(p, _dirichlet_inputs(63))
    assert float((a - b[1::2, 1::2]).abs().max() / a.abs().max()) < 1e-6
    a = sno_forward(p, _dirichlet_inputs(31), activation="identity")
    b = sno_forward(p, _dirichlet_inputs(63), activation="identity")
    assert float((a - b[1::2, 1::2]).abs().max() / a.abs().max()) < 1e-12


@pytest.mark.parametrize("basis", ["sine", "fourier"])
def test_output_real_and_finite(basis):
    p = init_params(8, 20, basis=basis, seed=1)
    out = sno_forward(p, torch.randn(3, 2, 9, 9))
    assert not out.is_complex() and bool(torch.isfinite(out).all())


def test_forward_errors():
    p = init_params(4, 3)
    with pytest.raises(DimensionMismatch):
        sno_forward(p, torch.randn(1, 3, 8, 8))
    with pytest.raises(DimensionMismatch):
        sno_forward(p, torch.randn(1, 2, 8, 7))
    p.tensors["lin_w1"][0, 0] = float("nan")
    with pytest.raises(NonFiniteParameters):
        sno_forward(p, torch.randn(1, 2, 8, 8))


def test_single_and_batched_agree():
    p = init_params(8, 6, dtype=F64, seed=2)
    x = torch.randn(3, 2, 10, 10, dtype=F64)
    batched = sno_forward(p, x)
    for i in range(3):
        assert torch.allclose(sno_forward(p, x[i]), batched[i], rtol=1e-12, atol=1e-12)


def test_preconditioner_wrapper_homogeneous():
    prob = make_diffusion_instance(GridDescriptor(12), 0)
    B = as_preconditioner(init_params(8, 6, seed=4), prob)
    assert np.all(B(np.zeros(144)) == 0)
    r = np.random.default_rng(0).standard_normal(144)
    base = B(r)
    for alpha in (2.0**-30, 0.25, 8.0, 2.0**40):
        assert np.array_equal(B(alpha * r), alpha * base)
    assert np.allclose(B(3.7 * r), 3.7 * base, rtol=1e-6, atol=1e-6 * np.abs(base).max())


def test_preconditioner_shape_check():
    prob = make_poisson_instance(GridDescriptor(6), 0)
    B = SnoPreconditioner(init_params(4, 3), prob.a)
    with pytest.raises(DimensionMismatch):
        B(np.ones(35))


@pytest.mark.parametrize("basis", ["sine", "fourier"])
def test_checkpoint_roundtrip(tmp_path, basis):
    p = init_params(6, 4, basis=basis, dtype=F64, seed=9)
    save_checkpoint(p, tmp_path / "ck")
    q = load_checkpoint(tmp_path / "ck")
    assert q.architecture() == p.architecture()
    for name in p.names():
        assert torch.equal(p.tensors[name], q.tensors[name])
    if basis == "fourier":
        assert q.tensors["spec0"].shape[-1] == 2


def test_wrapper_coefficient_scaling():
    prob = make_diffusion_instance(GridDescriptor(10), 1)
    p = init_params(6, 5, seed=3)
    r = np.random.default_rng(1).standard_normal(100)
    base = SnoPreconditioner(p, prob.a)(r)
    assert np.array_equal(SnoPreconditioner(p, 4.0 * prob.a)(r), base / 4.0)


def test_wrapper_poisson_is_plain_rms_wrapper():
    p = init_params(6, 5, seed=3)
    r = np.random.default_rng(2).standard_normal(64)
    s = np.linalg.norm(r) / 8
    x = torch.tensor(np.stack([(r / s).reshape(8, 8), np.ones((8, 8))]), dtype=torch.float32)
    ref = sno_forward(p, x).double().numpy().reshape(-1) * s
    assert np.array_equal(SnoPreconditioner(p, np.ones((8, 8)))(r), ref)

"""Spectral neural operator: analysis/synthesis bases and the encoder-processor-decoder net.

Two bases drive the spectral layers:

* ``sine``: the Dirichlet sine basis sin(pi k x) on the interior nodes
  x_j = j/(n+1), realized through the general quadrature machinery
  (uniform weights, normalizers 1/2).  It is exact on the grid, vanishes on
  the boundary and nests across grids n and 2n+1.
* ``fourier``: a truncated 2-D discrete Fourier transform with a real-input
  half-plane of modes, the classic FNO construction.

The processor's mode-mixing tensors act on the K x K lowest coefficients.
Training runs in float32 by default; every routine also works in float64.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DimensionMismatch, FormatError, NonFiniteParameters
from .tensor_io import read_tensor, write_tensor

BASES = ("sine", "fourier")


# ---------------------------------------------------------------------------
# quadrature bases


@dataclass(frozen=True, eq=False)
class QuadratureBasis:
    """Discrete orthogonal basis p_i sampled on quadrature nodes.

    ``values[j, i] = p_i(x_j)``; ``norms[i] = h_i`` is the squared norm of p_i
    under the quadrature rule, so that analysis is c = D^{-1} S^T (f * w).
    """

    nodes: np.ndarray
    weights: np.ndarray
    values: np.ndarray
    norms: np.ndarray

    def __post_init__(self):
        m, k = self.values.shape
        if self.nodes.shape != (m,) or self.weights.shape != (m,) or self.norms.shape != (k,):
            raise DimensionMismatch("inconsistent quadrature basis shapes")

    @property
    def size(self) -> int:
        return self.values.shape[1]

    @classmethod
    def legendre(cls, num_nodes: int, num_modes: int | None = None) -> "QuadratureBasis":
        """Legendre polynomials on (0, 1) with Gauss-Legendre quadrature."""
        num_modes = num_nodes if num_modes is None else num_modes
        if num_modes > num_nodes:
            raise ValueError("Gauss quadrature with m nodes is exact only for m modes")
        t, w = np.polynomial.legendre.leggauss(num_nodes)
        values = np.polynomial.legendre.legvander(t, num_modes - 1)
        norms = 1.0 / (2.0 * np.arange(num_modes) + 1.0)  # on (0,1) with weights w/2
        return cls(0.5 * (t + 1.0), 0.5 * w, values, norms)

    @classmethod
    def sine(cls, n: int, num_modes: int | None = None) -> "QuadratureBasis":
        """sin(pi k x), k = 1..K, on the interior nodes of an n-point Dirichlet grid."""
        num_modes = n if num_modes is None else min(num_modes, n)
        x = np.arange(1, n + 1) / (n + 1)
        values = np.sin(np.pi * np.outer(x, np.arange(1, num_modes + 1)))
        return cls(x, np.full(n, 1.0 / (n + 1)), values, np.full(num_modes, 0.5))

    def analysis_matrix(self) -> np.ndarray:
        """Matrix D^{-1} S^T diag(w), shape (modes, nodes)."""
        return (self.values * self.weights[:, None]).T / self.norms[:, None]

    def analysis(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f)
        if f.shape[0] != len(self.nodes):
            raise DimensionMismatch(f"field has {f.shape[0]} samples, basis has {len(self.nodes)} nodes")
        return self.analysis_matrix() @ f

    def synthesis(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c)
        if c.shape[0] > self.size:
            raise DimensionMismatch(f"{c.shape[0]} coefficients exceed basis size {self.size}")
        return self.values[:, : c.shape[0]] @ c

    def analysis2d(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f)
        m = len(self.nodes)
        if f.shape != (m, m):
            raise DimensionMismatch(f"expected a {m}x{m} field, got {f.shape}")
        M = self.analysis_matrix()
        return M @ f @ M.T

    def synthesis2d(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c)
        if c.ndim != 2 or max(c.shape) > self.size:
            raise DimensionMismatch(f"coefficient block {c.shape} exceeds basis size {self.size}")
        return self.values[:, : c.shape[0]] @ c @ self.values[:, : c.shape[1]].T

    def inner(self, f, g) -> float:
        """Quadrature inner product sum_j w_j f_j g_j."""
        return float(np.sum(self.weights * np.asarray(f) * np.asarray(g)))


# ---------------------------------------------------------------------------
# fourier basis


def fourier_mode_box(K: int, n: int) -> tuple[np.ndarray, int]:
    """Retained first-axis frequencies and the count along the half axis.

    Frequencies stay strictly below the Nyquist index of an n-point grid so
    every retained mode is represented exactly and real-valued synthesis is
    unambiguous.
    """
    pos = min(K // 2, (n + 1) // 2)  # frequencies 0 .. pos-1
    neg = min(K // 2, (n - 1) // 2)  # frequencies -neg .. -1
    k1 = np.concatenate([np.arange(pos), np.arange(-neg, 0)])
    k2 = min(K, (n + 1) // 2)
    return k1.astype(np.int64), k2


@dataclass(frozen=True)
class FourierBasis:
    """Truncated 2-D Fourier transform on the periodic frame x_j = j/n.

    Coefficients live on a ``(len(k1), k2)`` box with k1 in [-K/2, K/2) and
    k2 in [0, K); fields are real and the k2 > 0 modes implicitly carry
    their complex conjugates.
    """

    K: int = 20

    def modes(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        k1, k2 = fourier_mode_box(self.K, n)
        return k1, np.arange(k2)

    def analysis(self, field: np.ndarray) -> np.ndarray:
        field = np.asarray(field)
        if field.ndim != 2 or field.shape[0] != field.shape[1]:
            raise DimensionMismatch("Fourier analysis needs a square field")
        n = field.shape[0]
        F = np.fft.fft2(field, norm="forward")
        k1, k2 = self.modes(n)
        return F[np.ix_(k1 % n, k2)]

    def synthesis(self, coeffs: np.ndarray, n: int) -> np.ndarray:
        coeffs = np.asarray(coeffs, dtype=complex)
        k1, k2 = self.modes(n)
        if coeffs.shape[0] > len(k1) or coeffs.shape[1] > len(k2):
            raise DimensionMismatch(
                f"coefficient box {coeffs.shape} exceeds {(len(k1), len(k2))} modes at n={n}"
            )
        full = np.zeros((n, n // 2 + 1), dtype=complex)
        full[np.ix_(k1[: coeffs.shape[0]] % n, k2[: coeffs.shape[1]])] = coeffs
        return np.fft.irfft2(full, s=(n, n), norm="forward")


# ---------------------------------------------------------------------------
# parameters


@dataclass
class SnoParams:
    """All learnable tensors of the operator, keyed by name.

    Names: ``enc_w (W, C)``, ``enc_b (W,)``, per layer ``spec{l}``,
    ``lin_w{l} (W, W)``, ``lin_b{l} (W,)``, and ``dec_w (1, W)``, ``dec_b (1,)``.
    Spectral tensors are (W_in, W_out, K, K) for the sine basis and
    (W_in, W_out, K, K, 2) holding real and imaginary parts for Fourier.
    """

    tensors: dict[str, torch.Tensor]
    width: int
    modes: int
    layers: int
    in_channels: int = 2
    basis: str = "sine"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.basis not in BASES:
            raise ValueError(f"basis must be one of {BASES}")
        for name, shape in self.expected_shapes().items():
            t = self.tensors.get(name)
            if t is None or tuple(t.shape) != shape:
                got = None if t is None else tuple(t.shape)
                raise DimensionMismatch(f"parameter {name}: expected {shape}, got {got}")

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        W, K, C = self.width, self.modes, self.in_channels
        spec = (W, W, K, K, 2) if self.basis == "fourier" else (W, W, K, K)
        shapes = {"enc_w": (W, C), "enc_b": (W,)}
        for l in range(self.layers):
            shapes[f"spec{l}"] = spec
            shapes[f"lin_w{l}"] = (W, W)
            shapes[f"lin_b{l}"] = (W,)
        shapes["dec_w"] = (1, W)
        shapes["dec_b"] = (1,)
        return shapes

    @property
    def dtype(self) -> torch.dtype:
        return self.tensors["enc_w"].dtype

    def names(self) -> list[str]:
        return list(self.expected_shapes())

    def parameters(self) -> list[torch.Tensor]:
        return [self.tensors[k] for k in self.names()]

    def count(self) -> int:
        return sum(int(t.numel()) for t in self.tensors.values())

    def to(self, dtype: torch.dtype) -> "SnoParams":
        return self.replace({k: v.detach().to(dtype).clone() for k, v in self.tensors.items()})

    def clone(self) -> "SnoParams":
        return self.replace({k: v.detach().clone() for k, v in self.tensors.items()})

    def replace(self, tensors: dict[str, torch.Tensor]) -> "SnoParams":
        return SnoParams(tensors, self.width, self.modes, self.layers, self.in_channels,
                         self.basis, dict(self.meta))

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.tensors.values())

    def architecture(self) -> dict:
        return {"width": self.width, "modes": self.modes, "layers": self.layers,
                "in_channels": self.in_channels, "basis": self.basis}


def parameter_count(width: int, modes: int, layers: int = 4, in_channels: int = 2,
                    basis: str = "sine") -> int:
    per_mode = 2 if basis == "fourier" else 1
    processor = layers * (width * width * modes * modes * per_mode + width * width + width)
    return processor + (in_channels * width + width) + (width + 1)


def init_params(width: int = 32, modes: int = 20, layers: int = 4, in_channels: int = 2,
                basis: str = "sine", seed: int = 0, dtype: torch.dtype = torch.float32) -> SnoParams:
    """FNO-style initialization: spectral weights U(0,1)/W^2, dense weights U(+-1/sqrt(fan_in))."""
    g = torch.Generator().manual_seed(seed)

    def uniform(shape, bound):
        return (torch.rand(shape, generator=g, dtype=torch.float64) * 2 - 1) * bound

    W, K, C = width, modes, in_channels
    t = {"enc_w": uniform((W, C), 1 / math.sqrt(C)), "enc_b": uniform((W,), 1 / math.sqrt(C))}
    for l in range(layers):
        shape = (W, W, K, K, 2) if basis == "fourier" else (W, W, K, K)
        t[f"spec{l}"] = torch.rand(shape, generator=g, dtype=torch.float64) / (W * W)
        t[f"lin_w{l}"] = uniform((W, W), 1 / math.sqrt(W))
        t[f"lin_b{l}"] = uniform((W,), 1 / math.sqrt(W))
    t["dec_w"] = uniform((1, W), 1 / math.sqrt(W))
    t["dec_b"] = uniform((1,), 1 / math.sqrt(W))
    t = {k: v.to(dtype) for k, v in t.items()}
    return SnoParams(t, W, K, layers, C, basis, {"seed": seed})


def zero_params_like(params: SnoParams) -> SnoParams:
    return params.replace({k: torch.zeros_like(v) for k, v in params.tensors.items()})


# ---------------------------------------------------------------------------
# autograd kernels
#
# Both functions exist for speed: they keep the backward pass on contiguous
# buffers and avoid the generic graph of the elementwise GeLU formula.


class _BatchedMix(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a, m):
        a = a.contiguous()
        ctx.save_for_backward(a, m)
        return torch.bmm(a, m)

    @staticmethod
    def backward(ctx, g):
        a, m = ctx.saved_tensors
        g = g.contiguous()
        return torch.bmm(g, m.transpose(1, 2)), torch.bmm(a.transpose(1, 2), g)


class _Gelu(torch.autograd.Function):
    """Exact (erf) GeLU that stores its derivative instead of its input."""

    @staticmethod
    def forward(ctx, x):
        cdf = torch.erf(x * (1 / math.sqrt(2))).add_(1).mul_(0.5)
        deriv = torch.exp(x * x * (-0.5)).mul_(x).mul_(1 / math.sqrt(2 * math.pi)).add_(cdf)
        ctx.save_for_backward(deriv)
        return cdf.mul_(x)

    @staticmethod
    def backward(ctx, g):
        (deriv,) = ctx.saved_tensors
        return g * deriv


def gelu(x: torch.Tensor) -> torch.Tensor:
    return _Gelu.apply(x)


_SINE_CACHE: dict = {}


def _sine_operators(n: int, K: int, dtype: torch.dtype):
    """Transposed analysis and synthesis matrices for row-vector products."""
    key = (n, K, dtype)
    if key not in _SINE_CACHE:
        basis = QuadratureBasis.sine(n, K)
        A = basis.analysis_matrix()  # (k, n)
        S = basis.values  # (n, k)
        _SINE_CACHE[key] = (
            torch.tensor(A.T.copy(), dtype=dtype),
            torch.tensor(S.T.copy(), dtype=dtype),
        )
    return _SINE_CACHE[key]


def _sine_spectral(h, weight, n, b):
    """h: (W, b*n*n) channel-major; weight: (W_in, W_out, K, K)."""
    W = h.shape[0]
    AT, ST = _sine_operators(n, weight.shape[2], h.dtype)
    k = AT.shape[1]
    # analysis along the last grid axis, then the first
    t = (h.reshape(-1, n) @ AT).view(W * b, n, k).transpose(1, 2).reshape(-1, n)
    c = (t @ AT).view(W, b, k * k)  # coefficient index (k2, k1)
    m = weight[:, :, :k, :k].permute(3, 2, 0, 1).reshape(k * k, W, W)
    o = _BatchedMix.apply(c.permute(2, 1, 0), m)  # (kk, b, W_out)
    o = o.permute(2, 1, 0).reshape(-1, k)
    t = (o @ ST).view(W * b, k, n).transpose(1, 2).reshape(-1, k)
    return (t @ ST).view(W, -1)


def _fourier_spectral(h, weight, n, b):
    """Truncated real FFT path; weight: (W_in, W_out, K, K, 2)."""
    W = h.shape[0]
    K = weight.shape[2]
    k1, k2 = fourier_mode_box(K, n)
    pos = int((k1 >= 0).sum())
    neg = len(k1) - pos
    hf = torch.fft.rfft2(h.reshape(W, b, n, n), norm="forward")
    lo = torch.cat([hf[:, :, :pos, :k2], hf[:, :, n - neg:, :k2]], 2)  # (W, b, kx, k2)
    w = torch.cat([weight[:, :, :pos, :k2], weight[:, :, K - neg:, :k2]], 2)  # (Wi, Wo, kx, k2, 2)
    kx = pos + neg
    a = torch.view_as_real(lo).permute(2, 3, 1, 4, 0).reshape(kx * k2, b, 2 * W)
    wr = w[..., 0].permute(2, 3, 0, 1).reshape(kx * k2, W, W)
    wi = w[..., 1].permute(2, 3, 0, 1).reshape(kx * k2, W, W)
    # complex product as a real block matrix: [re, im] @ [[wr, wi], [-wi, wr]]
    m = torch.cat([torch.cat([wr, wi], 2), torch.cat([-wi, wr], 2)], 1)
    o = _BatchedMix.apply(a, m).reshape(kx, k2, b, 2, W).permute(4, 2, 0, 1, 3)
    o = torch.view_as_complex(o.contiguous())  # (W, b, kx, k2)
    o = torch.nn.functional.pad(o, (0, n // 2 + 1 - k2))
    full = torch.cat([o[:, :, :pos], o.new_zeros(W, b, n - kx, n // 2 + 1), o[:, :, pos:]], 2)
    return torch.fft.irfft2(full, s=(n, n), norm="forward").reshape(W, -1)


def sno_forward(params: SnoParams, x: torch.Tensor, activation: str = "gelu",
                check_finite: bool = True) -> torch.Tensor:
    """Apply the operator to stacked channel fields.

    ``x`` has shape (C, n, n) or (b, C, n, n); the result has shape (n, n)
    or (b, n, n).  Each processor layer adds the spectral path to a pointwise
    bypass and applies GeLU, except after the last layer.
    """
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[-1] != x.shape[-2]:
        raise DimensionMismatch(f"expected (b, C, n, n) input, got {tuple(x.shape)}")
    b, C, n, _ = x.shape
    if C != params.in_channels:
        raise DimensionMismatch(f"input has {C} channels, operator expects {params.in_channels}")
    if check_finite and not params.is_finite():
        raise NonFiniteParameters("operator parameters contain NaN or Inf")
    if activation not in ("gelu", "identity"):
        raise ValueError(f"unknown activation {activation!r}")
    P = params.tensors
    x = x.to(params.dtype)
    spectral = _sine_spectral if params.basis == "sine" else _fourier_spectral
    # channel-major layout (channels, b*n*n) keeps every pointwise map a single matmul
    h = torch.addmm(P["enc_b"][:, None], P["enc_w"], x.transpose(0, 1).reshape(C, -1))
    for l in range(params.layers):
        h = spectral(h, P[f"spec{l}"], n, b) + torch.addmm(P[f"lin_b{l}"][:, None], P[f"lin_w{l}"], h)
        if l < params.layers - 1 and activation == "gelu":
            h = gelu(h)
    out = torch.addmm(P["dec_b"][:, None], P["dec_w"], h).view(b, n, n)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# preconditioner wrapper


def input_channels(r_normalized: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """Stack (b, n, n) normalized residuals with coefficient fields into (b, 2, n, n)."""
    if a.dim() == 2:
        a = a.expand_as(r_normalized)
    return torch.stack([r_normalized, a.to(r_normalized.dtype)], 1)


def rms(r: np.ndarray) -> float:
    return float(np.linalg.norm(r) / math.sqrt(r.size))


def coefficient_scale(a: np.ndarray) -> float:
    """Mean of the coefficient field; A scales linearly with it."""
    abar = float(np.mean(a))
    if not abar > 0:
        raise DimensionMismatch("coefficient field must have a positive mean")
    return abar


class SnoPreconditioner:
    """Homogeneous wrapper B(r) = (s / abar) * net([r / s, a / abar]).

    s = ||r||_2 / sqrt(N) is the residual RMS and abar the mean of a.
    B is positively homogeneous of degree 1 in r, B(0) = 0, and scaling
    a by c scales B by 1/c exactly as it scales A^{-1}.  For Poisson
    (a = 1) the wrapper reduces to s * net([r / s, 1]).
    """

    name = "NO"

    def __init__(self, params: SnoParams, a: np.ndarray):
        if not params.is_finite():
            raise NonFiniteParameters("operator parameters contain NaN or Inf")
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatch("coefficient field must be square")
        self.params = params.clone()
        for t in self.params.tensors.values():
            t.requires_grad_(False)
        self.n = a.shape[0]
        self.abar = coefficient_scale(a)
        self.a = torch.tensor(a / self.abar, dtype=params.dtype)

    def __call__(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        if r.shape != (self.n * self.n,):
            raise DimensionMismatch(f"expected a residual of length {self.n ** 2}")
        s = rms(r)
        if s == 0.0:
            return np.zeros_like(r)
        x = torch.tensor((r / s).reshape(1, self.n, self.n), dtype=self.params.dtype)
        with torch.no_grad():
            out = sno_forward(self.params, input_channels(x, self.a), check_finite=False)
        return out.double().numpy().reshape(-1) * (s / self.abar)


def as_preconditioner(params: SnoParams, problem) -> SnoPreconditioner:
    return SnoPreconditioner(params, problem.a)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: SnoParams, directory: str | os.PathLike, extra: dict | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    files = {}
    for name in params.names():
        fname = f"{name}.fcgt"
        write_tensor(os.path.join(directory, fname), params.tensors[name].detach().double().numpy())
        files[name] = fname
    meta = {
        "format": "fcgno-checkpoint",
        "architecture": params.architecture(),
        "dtype": str(params.dtype).replace("torch.", ""),
        "files": files,
        "meta": params.meta,
    }
    if extra:
        meta.update(extra)
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory: str | os.PathLike, dtype: torch.dtype | None = None) -> SnoParams:
    path = os.path.join(directory, "meta.json")
    try:
        with open(path) as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"no checkpoint metadata at {path}") from None
    if meta.get("format") != "fcgno-checkpoint":
        raise FormatError(f"{path} is not a checkpoint")
    arch = meta["architecture"]
    if dtype is None:
        dtype = getattr(torch, meta.get("dtype", "float32"))
    tensors = {
        name: torch.from_numpy(read_tensor(os.path.join(directory, fname))).to(dtype)
        for name, fname in meta["files"].items()
    }
    return SnoParams(tensors, int(arch["width"]), int(arch["modes"]), int(arch["layers"]),
                     int(arch["in_channels"]), arch["basis"], meta.get("meta", {}))

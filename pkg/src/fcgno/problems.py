"""Random elliptic problems on the unit square and their finite-difference systems."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import FormatError, NonPositiveCoefficient, ResampleLimitExceeded
from .sparse import CsrMatrix
from .tensor_io import read_tensor, write_tensor

# stream ids used to derive independent generators from one user seed
_STREAM_F = 0
_STREAM_A = 1

MIN_COEFFICIENT = 1e-3
MAX_RESAMPLES = 100


@dataclass(frozen=True)
class GridDescriptor:
    """Uniform grid with ``n`` interior nodes per dimension on (0, 1)^2."""

    n: int
    dim: int = 2

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"grid needs n >= 2 interior points, got {self.n}")
        if self.dim != 2:
            raise ValueError("only two-dimensional grids are supported")

    @property
    def h(self) -> float:
        return 1.0 / (self.n + 1)

    @property
    def size(self) -> int:
        return self.n * self.n

    def coordinates(self) -> np.ndarray:
        """Interior node coordinates i*h for i = 1..n."""
        return np.arange(1, self.n + 1) / (self.n + 1)


@dataclass(frozen=True)
class TrigPolySpec:
    n1: int = 5
    n2: int = 5
    alpha: float = 2.0
    offset: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n1 < 0 or self.n2 < 0:
            raise ValueError("mode counts must be nonnegative")
        if self.alpha < 0:
            raise ValueError("decay exponent must be nonnegative")


def trig_coefficients(spec: TrigPolySpec) -> np.ndarray:
    """Complex coefficients c_mk = u + i v with u, v standard normal."""
    rng = np.random.default_rng(spec.seed)
    shape = (spec.n1 + 1, spec.n2 + 1)
    u = rng.standard_normal(shape)
    v = rng.standard_normal(shape)
    return u + 1j * v


def sample_trig_field(
    spec: TrigPolySpec, grid: GridDescriptor, coefficients: np.ndarray | None = None
) -> np.ndarray:
    """Real part of a decaying random trigonometric polynomial on the interior nodes.

    Returns an ``(n, n)`` array indexed ``[i, j]`` for the node ``(x_i, x_j)``.
    ``coefficients`` overrides the random draw, which is handy for tests.
    """
    c = trig_coefficients(spec) if coefficients is None else np.asarray(coefficients, complex)
    if c.shape != (spec.n1 + 1, spec.n2 + 1):
        raise ValueError(f"coefficient array must have shape {(spec.n1 + 1, spec.n2 + 1)}")
    m = np.arange(spec.n1 + 1)
    k = np.arange(spec.n2 + 1)
    c = c / (1.0 + m[:, None] + k[None, :]) ** spec.alpha
    x = grid.coordinates()
    e1 = np.exp(2j * np.pi * np.outer(x, m))  # (n, n1+1)
    e2 = np.exp(2j * np.pi * np.outer(x, k))  # (n, n2+1)
    return (e1 @ c @ e2.T).real + spec.offset


def trig_point_variance(spec: TrigPolySpec) -> float:
    """Closed-form pointwise variance of the field (independent of the point)."""
    m = np.arange(spec.n1 + 1)
    k = np.arange(spec.n2 + 1)
    # Re((u + iv) e^{i t}) = u cos t - v sin t has unit variance
    return float(np.sum((1.0 + m[:, None] + k[None, :]) ** (-2.0 * spec.alpha)))


def derive_seed(seed: int, stream: int, attempt: int = 0) -> int:
    return int(np.random.SeedSequence([seed, stream, attempt]).generate_state(1, np.uint64)[0])


def assemble_fdm(a: np.ndarray, grid: GridDescriptor) -> CsrMatrix:
    """Five-point discretization of -div(a grad u) with zero Dirichlet data.

    Face coefficients are arithmetic means of the two adjacent nodal values.
    Outside the domain the coefficient is extended by its adjacent interior
    value, so a boundary face carries the nodal value itself.
    """
    n = grid.n
    a = np.asarray(a, dtype=np.float64).reshape(n, n)
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise NonPositiveCoefficient(f"coefficient must be positive, min = {a.min():.3e}")
    inv_h2 = float((n + 1) ** 2)
    # coupling between node [i, j] and [i+1, j] (axis 0) and [i, j+1] (axis 1)
    c0 = 0.5 * (a[:-1, :] + a[1:, :]) * inv_h2
    c1 = 0.5 * (a[:, :-1] + a[:, 1:]) * inv_h2
    diag = np.zeros((n, n))
    diag[:-1, :] += c0
    diag[1:, :] += c0
    diag[:, :-1] += c1
    diag[:, 1:] += c1
    # boundary faces
    diag[0, :] += a[0, :] * inv_h2
    diag[-1, :] += a[-1, :] * inv_h2
    diag[:, 0] += a[:, 0] * inv_h2
    diag[:, -1] += a[:, -1] * inv_h2

    idx = np.arange(n * n).reshape(n, n)
    rows = np.concatenate([idx[:-1, :].ravel(), idx[1:, :].ravel(),
                           idx[:, :-1].ravel(), idx[:, 1:].ravel(), idx.ravel()])
    cols = np.concatenate([idx[1:, :].ravel(), idx[:-1, :].ravel(),
                           idx[:, 1:].ravel(), idx[:, :-1].ravel(), idx.ravel()])
    vals = np.concatenate([-c0.ravel(), -c0.ravel(), -c1.ravel(), -c1.ravel(), diag.ravel()])
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(n * n, n * n)).tocsr()
    return CsrMatrix.from_scipy(mat)


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    grid: GridDescriptor
    a: np.ndarray
    f: np.ndarray
    matrix: CsrMatrix
    kind: str = "poisson"
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def rhs(self) -> np.ndarray:
        return self.f.reshape(-1)


def _rhs_spec(seed: int) -> TrigPolySpec:
    return TrigPolySpec(5, 5, 2.0, 0.0, derive_seed(seed, _STREAM_F))


def make_poisson_instance(grid: GridDescriptor, seed: int) -> ProblemInstance:
    a = np.ones((grid.n, grid.n))
    f = sample_trig_field(_rhs_spec(seed), grid)
    return ProblemInstance(grid, a, f, assemble_fdm(a, grid), "poisson", seed)


def make_diffusion_instance(
    grid: GridDescriptor, seed: int, offset: float = 10.0, max_attempts: int = MAX_RESAMPLES
) -> ProblemInstance:
    for attempt in range(max_attempts):
        spec = TrigPolySpec(5, 5, 2.0, offset, derive_seed(seed, _STREAM_A, attempt))
        a = sample_trig_field(spec, grid)
        if a.min() > MIN_COEFFICIENT:
            break
    else:
        raise ResampleLimitExceeded(
            f"{max_attempts} coefficient draws had min(a) <= {MIN_COEFFICIENT}"
        )
    f = sample_trig_field(_rhs_spec(seed), grid)
    return ProblemInstance(
        grid, a, f, assemble_fdm(a, grid), "diffusion", seed, {"attempts": attempt + 1}
    )


PROBLEM_FACTORIES = {"poisson": make_poisson_instance, "diffusion": make_diffusion_instance}


def make_instance(kind: str, grid: GridDescriptor, seed: int) -> ProblemInstance:
    try:
        factory = PROBLEM_FACTORIES[kind]
    except KeyError:
        raise ValueError(f"unknown problem kind {kind!r}") from None
    return factory(grid, seed)


def make_instances(kind: str, n: int, seeds) -> list[ProblemInstance]:
    grid = GridDescriptor(n)
    return [make_instance(kind, grid, int(s)) for s in seeds]


def save_problems(directory: str | os.PathLike, problems: list[ProblemInstance]) -> list[dict]:
    """Write fields and matrices for each problem; returns meta entries."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, p in enumerate(problems):
        prefix = f"problem{i:04d}"
        write_tensor(os.path.join(directory, f"{prefix}_a.fcgt"), p.a)
        write_tensor(os.path.join(directory, f"{prefix}_f.fcgt"), p.f)
        entries.append({
            "index": i,
            "kind": p.kind,
            "seed": p.seed,
            "n": p.grid.n,
            "a": f"{prefix}_a.fcgt",
            "f": f"{prefix}_f.fcgt",
            "matrix": p.matrix.save(directory, f"{prefix}_A"),
        })
    return entries


def load_problems(directory: str | os.PathLike, entries: list[dict]) -> list[ProblemInstance]:
    problems = []
    for e in entries:
        grid = GridDescriptor(int(e["n"]))
        a = read_tensor(os.path.join(directory, e["a"]))
        f = read_tensor(os.path.join(directory, e["f"]))
        if a.shape != (grid.n, grid.n) or f.shape != (grid.n, grid.n):
            raise FormatError(f"field shape mismatch for problem {e['index']}")
        A = CsrMatrix.load(directory, e["matrix"])
        problems.append(ProblemInstance(grid, a, f, A, e["kind"], int(e["seed"])))
    return problems


def spec_dict(spec: TrigPolySpec) -> dict:
    return asdict(spec)


def write_json(path: str | os.PathLike, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")

"""Training data from Krylov subspaces, relative-error losses and the optimization loop."""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .errors import DegenerateError, FormatError, NonFiniteGradient
from .krylov import cg
from .problems import (
    GridDescriptor,
    ProblemInstance,
    TrigPolySpec,
    derive_seed,
    load_problems,
    sample_trig_field,
    save_problems,
    write_json,
)
from .sparse import CsrMatrix, reference_solve, spmv
from .spectral import (SnoParams, coefficient_scale, init_params, input_channels, rms, save_checkpoint,
                       sno_forward)
from .tensor_io import read_tensor, write_tensor

LOSSES = ("notay", "l2")
SAMPLINGS = ("krylov", "random")

# stream ids for seeds derived from the dataset seed
_STREAM_U0 = 10
_STREAM_RANDOM_F = 11
_STREAM_RANDOM_U = 12

CONSISTENCY_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class KrylovSample:
    """A training pair: residual r and exact error e = A^{-1} r of one problem."""

    problem_index: int
    r: np.ndarray
    e: np.ndarray
    source_iteration: int


# width, batch size per (kind, grid) for the reference recipe
_RECIPE_WIDTH = {"poisson": {32: 32, 64: 32, 128: 32}, "diffusion": {32: 32, 64: 48, 128: 85}}
_RECIPE_BATCH = {"poisson": {32: 32, 64: 32, 128: 8}, "diffusion": {32: 16, 64: 16, 128: 4}}
_RECIPE_EPOCHS = {"poisson": 200, "diffusion": 150}


@dataclass(frozen=True)
class TrainConfig:
    kind: str = "poisson"
    grid: int = 32
    loss: str = "notay"
    sampling: str = "krylov"
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    lr_step: int = 50
    lr_gamma: float = 0.5
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    m_cg: int = 100
    n_train: int = 32
    width: int = 32
    modes: int = 20
    layers: int = 4
    basis: str = "sine"
    dtype: str = "float32"
    seed: int = 0
    data_seed: int = 0
    log_every: int = 0
    dump_dir: str | None = None

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.sampling not in SAMPLINGS:
            raise ValueError(f"sampling must be one of {SAMPLINGS}")
        for name in ("epochs", "batch_size", "m_cg", "n_train", "width", "modes", "layers", "lr_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.lr_gamma <= 0 or self.weight_decay < 0:
            raise ValueError("learning-rate settings must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @classmethod
    def recipe(cls, kind: str, grid: int, **overrides) -> "TrainConfig":
        """Reference hyperparameters for a problem family and training grid."""
        widths = _RECIPE_WIDTH[kind]
        batches = _RECIPE_BATCH[kind]
        near = min(widths, key=lambda g: abs(g - grid))
        base = dict(kind=kind, grid=grid, epochs=_RECIPE_EPOCHS[kind], batch_size=batches[near],
                    width=widths[near], n_train=grid)
        base.update(overrides)
        return cls(**base)

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------------------
# datasets


def _check_sample(A: CsrMatrix, r: np.ndarray, e: np.ndarray) -> None:
    rn = np.linalg.norm(r)
    if rn == 0 or np.linalg.norm(spmv(A, e) - r) > CONSISTENCY_TOL * rn:
        raise DegenerateError("sample violates A e = r")


def generate_krylov_dataset(problems: list[ProblemInstance], m_cg: int = 100,
                            seed: int = 0) -> list[KrylovSample]:
    """Residuals r_1..r_m of plain CG from a random start, paired with exact errors.

    For each problem u_0 ~ N(0, I) and CG runs exactly ``m_cg`` steps.  The
    exact error of iterate i is u_exact - u_i; it warm-starts a reference
    solve of A e = r_i so that every pair satisfies A e = r to reference
    accuracy even once the recurrence residual drifts from f - A u_i.
    """
    if m_cg < 1:
        raise ValueError("m_cg must be at least 1")
    samples = []
    for j, p in enumerate(problems):
        A = p.matrix
        u_exact = reference_solve(A, p.rhs)
        u0 = np.random.default_rng(derive_seed(seed, _STREAM_U0, j)).standard_normal(A.nrows)
        steps = []
        cg(A, p.rhs, u0=u0, tol=0.0, max_iter=m_cg,
           callback=lambda i, u, r: steps.append((i, u.copy(), r.copy())))
        for i, u, r in steps:
            if np.linalg.norm(r) == 0:
                break
            e = reference_solve(A, r, x0=u_exact - u)
            _check_sample(A, r, e)
            samples.append(KrylovSample(j, r, e, i))
    return samples


def generate_random_dataset(problems: list[ProblemInstance], count_per_problem: int = 100,
                            seed: int = 0) -> list[KrylovSample]:
    """Residuals r = f' - A u' of fresh right-hand sides f' and random u' ~ N(0, I)."""
    samples = []
    for j, p in enumerate(problems):
        A = p.matrix
        for c in range(count_per_problem):
            spec = TrigPolySpec(5, 5, 2.0, 0.0, derive_seed(seed, _STREAM_RANDOM_F, j * 1_000_003 + c))
            f = sample_trig_field(spec, p.grid).reshape(-1)
            u = np.random.default_rng(derive_seed(seed, _STREAM_RANDOM_U, j * 1_000_003 + c)
                                      ).standard_normal(A.nrows)
            r = f - spmv(A, u)
            e = reference_solve(A, r)
            _check_sample(A, r, e)
            samples.append(KrylovSample(j, r, e, 0))
    return samples


def generate_dataset(problems, sampling: str, m_cg: int, seed: int) -> list[KrylovSample]:
    if sampling == "krylov":
        return generate_krylov_dataset(problems, m_cg, seed)
    if sampling == "random":
        return generate_random_dataset(problems, m_cg, seed)
    raise ValueError(f"unknown sampling {sampling!r}")


def save_dataset(directory: str | os.PathLike, problems: list[ProblemInstance],
                 samples: list[KrylovSample], meta: dict | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    entries = save_problems(directory, problems)
    if samples:
        write_tensor(os.path.join(directory, "residuals.fcgt"), np.stack([s.r for s in samples]))
        write_tensor(os.path.join(directory, "errors.fcgt"), np.stack([s.e for s in samples]))
        write_tensor(os.path.join(directory, "problem_index.fcgt"),
                     np.array([s.problem_index for s in samples], dtype=np.uint64), "u64")
        write_tensor(os.path.join(directory, "source_iteration.fcgt"),
                     np.array([s.source_iteration for s in samples], dtype=np.uint64), "u64")
    full = dict(meta or {})
    full.update({
        "format": "fcgno-dataset",
        "grid": problems[0].grid.n if problems else None,
        "problem_count": len(problems),
        "sample_count": len(samples),
        "problems": entries,
    })
    write_json(os.path.join(directory, "meta.json"), full)


def load_dataset(directory: str | os.PathLike):
    """Return (problems, samples, meta) from a dataset directory."""
    path = os.path.join(directory, "meta.json")
    try:
        with open(path) as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"no dataset metadata at {path}") from None
    if meta.get("format") != "fcgno-dataset":
        raise FormatError(f"{path} is not a dataset")
    problems = load_problems(directory, meta["problems"])
    samples = []
    if meta["sample_count"]:
        R = read_tensor(os.path.join(directory, "residuals.fcgt"))
        E = read_tensor(os.path.join(directory, "errors.fcgt"))
        P = read_tensor(os.path.join(directory, "problem_index.fcgt"), "u64")
        I = read_tensor(os.path.join(directory, "source_iteration.fcgt"), "u64")
        if not (len(R) == len(E) == len(P) == len(I) == meta["sample_count"]):
            raise FormatError("sample tensors disagree with meta.json")
        samples = [KrylovSample(int(p), r, e, int(i)) for r, e, p, i in zip(R, E, P, I)]
    return problems, samples, meta


# ---------------------------------------------------------------------------
# losses


def five_point_stencil(A: CsrMatrix, n: int) -> np.ndarray:
    """Rewrite a five-point matrix as per-node coefficients.

    Returns (5, n, n): the diagonal and the couplings to the [i+1, j],
    [i-1, j], [i, j+1] and [i, j-1] neighbours, so that
    (A v)[i, j] = c0 v[i,j] + c1 v[i+1,j] + c2 v[i-1,j] + c3 v[i,j+1] + c4 v[i,j-1].
    """
    M = A.scipy.tocoo()
    row_i, row_j = np.divmod(M.row, n)
    col_i, col_j = np.divmod(M.col, n)
    di, dj = col_i - row_i, col_j - row_j
    st = np.zeros((5, n, n))
    offsets = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)]
    used = np.zeros(len(M.data), dtype=bool)
    for k, (oi, oj) in enumerate(offsets):
        sel = (di == oi) & (dj == oj)
        st[k, row_i[sel], row_j[sel]] = M.data[sel]
        used |= sel
    if not used.all():
        raise ValueError("matrix is not a five-point stencil on this grid")
    return st


def apply_stencil(st: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Matrix-free A v for (b, n, n) fields with per-sample stencils (b, 5, n, n)."""
    z = torch.nn.functional.pad(v, (1, 1, 1, 1))
    return (st[:, 0] * v + st[:, 1] * z[:, 2:, 1:-1] + st[:, 2] * z[:, :-2, 1:-1]
            + st[:, 3] * z[:, 1:-1, 2:] + st[:, 4] * z[:, 1:-1, :-2])


@dataclass
class TrainingSet:
    """Samples as tensors in the wrapper's normalized frame.

    Residuals are divided by their RMS s, coefficient fields by their mean
    abar and errors by s / abar, so the network target is the error the
    wrapper must produce before rescaling.  Both losses are ratios and do
    not change under this per-sample scaling.
    """

    r: torch.Tensor  # (S, n, n)
    e: torch.Tensor  # (S, n, n)
    problem: torch.Tensor  # (S,) long
    a: torch.Tensor  # (P, n, n), divided by its mean
    stencil: torch.Tensor  # (P, 5, n, n)

    def __len__(self) -> int:
        return self.r.shape[0]

    def batch(self, idx) -> "TrainingSet":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return TrainingSet(self.r[idx], self.e[idx], self.problem[idx], self.a, self.stencil)

    def to(self, dtype: torch.dtype) -> "TrainingSet":
        return TrainingSet(self.r.to(dtype), self.e.to(dtype), self.problem,
                           self.a.to(dtype), self.stencil.to(dtype))


def make_training_set(problems: list[ProblemInstance], samples: list[KrylovSample],
                      dtype: torch.dtype = torch.float64) -> TrainingSet:
    if not samples:
        raise ValueError("empty sample list")
    n = problems[0].grid.n
    abar = np.array([coefficient_scale(p.a) for p in problems])
    scale = np.array([rms(s.r) for s in samples])
    owner = np.array([s.problem_index for s in samples])
    R = np.stack([s.r for s in samples]) / scale[:, None]
    E = np.stack([s.e for s in samples]) * (abar[owner] / scale)[:, None]
    return TrainingSet(
        torch.tensor(R.reshape(-1, n, n), dtype=dtype),
        torch.tensor(E.reshape(-1, n, n), dtype=dtype),
        torch.tensor(owner, dtype=torch.long),
        torch.tensor(np.stack([p.a / a for p, a in zip(problems, abar)]), dtype=dtype),
        torch.tensor(np.stack([five_point_stencil(p.matrix, n) for p in problems]), dtype=dtype),
    )


def per_sample_loss(out: torch.Tensor, batch: TrainingSet, kind: str) -> torch.Tensor:
    d = out - batch.e
    if kind == "notay":
        st = batch.stencil[batch.problem]
        num = (d * apply_stencil(st, d)).sum((1, 2))
        den = (batch.e * apply_stencil(st, batch.e)).sum((1, 2))
    elif kind == "l2":
        num = (d * d).sum((1, 2))
        den = (batch.e * batch.e).sum((1, 2))
    else:
        raise ValueError(f"unknown loss {kind!r}")
    if bool((den <= 0).any()):
        raise DegenerateError("sample with nonpositive error norm")
    # clamp guards round-off for outputs that reproduce e exactly
    return num.clamp_min(0).sqrt() / den.sqrt()


def batch_loss(params: SnoParams, batch: TrainingSet, kind: str, output=None) -> torch.Tensor:
    """Mean relative error of the wrapped operator over a batch (differentiable)."""
    if output is None:
        x = input_channels(batch.r.to(params.dtype), batch.a[batch.problem].to(params.dtype))
        output = sno_forward(params, x, check_finite=False)
    return per_sample_loss(output, batch.to(output.dtype), kind).mean()


def notay_loss(params: SnoParams, batch: TrainingSet, output=None) -> float:
    """Mean of ||B(r) - e||_A / ||e||_A."""
    with torch.no_grad():
        return float(batch_loss(params, batch, "notay", output))


def l2_loss(params: SnoParams, batch: TrainingSet, output=None) -> float:
    """Mean of ||B(r) - e||_2 / ||e||_2."""
    with torch.no_grad():
        return float(batch_loss(params, batch, "l2", output))


def loss_gradient(params: SnoParams, batch: TrainingSet, kind: str) -> dict[str, torch.Tensor]:
    """Reverse-mode gradient of the batch loss with respect to every parameter."""
    work = params.replace({k: v.detach().clone().requires_grad_(True)
                           for k, v in params.tensors.items()})
    loss = batch_loss(work, batch, kind)
    grads = torch.autograd.grad(loss, work.parameters())
    out = dict(zip(work.names(), grads))
    for name, g in out.items():
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    return out


# ---------------------------------------------------------------------------
# optimization


@dataclass
class TrainingResult:
    params: SnoParams
    curve: list[tuple[int, float, float]] = field(default_factory=list)  # (epoch, mean_loss, lr)
    seconds: float = 0.0

    def write_curve(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,mean_loss,lr\n")
            for ep, loss, lr in self.curve:
                fh.write(f"{ep},{loss!r},{lr!r}\n")


def _dump_state(config: TrainConfig, params: SnoParams, epoch: int, step: int, idx) -> str | None:
    if not config.dump_dir:
        return None
    path = os.path.join(config.dump_dir, f"nonfinite_epoch{epoch}_step{step}")
    save_checkpoint(params, path, {"config": config.to_dict(), "epoch": epoch, "step": step,
                                   "batch_indices": [int(i) for i in idx]})
    return path


def train(problems: list[ProblemInstance], config: TrainConfig,
          samples: list[KrylovSample] | None = None, params: SnoParams | None = None,
          log=None) -> TrainingResult:
    """Fit the operator with AdamW (decoupled weight decay) and a step schedule.

    Deterministic given the config seed: initialization and shuffling use
    their own generators.  Samples are generated from ``problems`` when not
    supplied.
    """
    if samples is None:
        samples = generate_dataset(problems, config.sampling, config.m_cg, config.data_seed)
    dtype = config.torch_dtype
    data = make_training_set(problems, samples, dtype)
    if params is None:
        params = init_params(config.width, config.modes, config.layers, 2, config.basis,
                             config.seed, dtype)
    params = params.to(dtype)
    for t in params.tensors.values():
        t.requires_grad_(True)
    opt = torch.optim.AdamW(params.parameters(), lr=config.lr, betas=config.betas,
                            eps=config.adam_eps, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, config.lr_step, config.lr_gamma)
    gen = torch.Generator().manual_seed(config.seed + 1)
    result = TrainingResult(params)
    t0 = time.perf_counter()
    N = len(data)
    for epoch in range(config.epochs):
        lr = opt.param_groups[0]["lr"]
        perm = torch.randperm(N, generator=gen)
        total = 0.0
        for step, start in enumerate(range(0, N, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            opt.zero_grad(set_to_none=True)
            loss = batch_loss(params, data.batch(idx), config.loss)
            loss.backward()
            if not all(bool(torch.isfinite(p.grad).all()) for p in params.parameters()):
                where = _dump_state(config, params, epoch, step, idx)
                raise NonFiniteGradient(
                    f"non-finite gradient at epoch {epoch}, step {step}"
                    + (f"; state dumped to {where}" if where else "")
                )
            opt.step()
            total += float(loss.detach()) * len(idx)
        sched.step()
        result.curve.append((epoch, total / N, lr))
        if log is not None and config.log_every and (epoch % config.log_every == 0
                                                     or epoch == config.epochs - 1):
            log(f"epoch {epoch} loss {total / N:.5f} lr {lr:.2e} "
                f"{time.perf_counter() - t0:.1f}s")
    for t in params.tensors.values():
        t.requires_grad_(False)
    result.seconds = time.perf_counter() - t0
    result.params = params.replace({k: v.detach() for k, v in params.tensors.items()})
    result.params.meta.update({"trained_grid": problems[0].grid.n, "config": config.to_dict()})
    return result


def training_problems(config: TrainConfig) -> list[ProblemInstance]:
    """Training instances for a config; seeds 0..n_train-1 offset by the data seed."""
    from .problems import make_instance

    grid = GridDescriptor(config.grid)
    return [make_instance(config.kind, grid, config.data_seed * 100_000 + j)
            for j in range(config.n_train)]


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)

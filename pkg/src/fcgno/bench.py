"""Experiment configuration, benchmark runs and report rendering."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FcgnoError
from .krylov import ConvergenceRecord, cg, fcg, iterations_to_threshold
from .precond import build_classical
from .problems import GridDescriptor, ProblemInstance, make_instance
from .sparse import reference_solve
from .spectral import SnoParams, SnoPreconditioner, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainingResult, train, training_problems

DEFAULT_METHODS = ("CG", "Jacobi(4)", "GS(1)", "GS(4)", "ILU(1)", "ILU(8)", "NO")
TEST_SEED_OFFSET = 100_000


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that defines one train/bench experiment.

    ``max_iter = 0`` selects the default policy: 2*grid for the learned
    operator on its training grid and 300 across grids.  Classical methods
    get at least 10*grid so that their counts at 1e-12 stay measurable.
    """

    kind: str = "poisson"
    train_grid: int = 32
    test_grid: int = 0  # 0: same as train_grid
    n_train: int = 0  # 0: equal to train_grid
    n_test: int = 20
    m_max: int = 20
    max_iter: int = 0
    thresholds: tuple[float, ...] = (1e-3, 1e-6, 1e-12)
    loss: str = "notay"
    sampling: str = "krylov"
    m_cg: int = 100
    methods: tuple[str, ...] = DEFAULT_METHODS
    epochs: int = 0  # 0: recipe value
    batch_size: int = 0
    width: int = 0
    lr_step: int = 0  # 0: recipe value
    modes: int = 20
    layers: int = 4
    basis: str = "sine"
    dtype: str = "float32"
    data_seed: int = 0
    train_seed: int = 0
    test_seed: int = 0
    allow_large: bool = False
    workers: int = 1  # threads solving test instances concurrently
    output_root: str = "runs"

    def __post_init__(self):
        if self.kind not in ("poisson", "diffusion"):
            raise ConfigError(f"kind must be poisson or diffusion, got {self.kind!r}")
        if self.train_grid < 2 or self.test_grid < 0:
            raise ConfigError("grids must be at least 2")
        if self.n_test < 1:
            raise ConfigError("n_test must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.m_max < 1:
            raise ConfigError("m_max must be at least 1")
        if list(self.thresholds) != sorted(self.thresholds, reverse=True) or not self.thresholds:
            raise ConfigError("thresholds must be nonempty and sorted in descending order")
        if self.loss not in ("notay", "l2"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.sampling not in ("krylov", "random"):
            raise ConfigError(f"unknown sampling {self.sampling!r}")
        if max(self.train_grid, self.grid) >= 64 and not self.allow_large:
            raise ConfigError("grids of 64 and above need allow_large = true (long runtimes)")

    @property
    def grid(self) -> int:
        return self.test_grid or self.train_grid

    @property
    def cross_grid(self) -> bool:
        return self.grid != self.train_grid

    def no_max_iter(self) -> int:
        if self.max_iter:
            return self.max_iter
        return 300 if self.cross_grid else 2 * self.grid

    def baseline_max_iter(self) -> int:
        return max(self.no_max_iter(), 10 * self.grid)

    def train_config(self) -> TrainConfig:
        over = {k: v for k, v in {
            "epochs": self.epochs, "batch_size": self.batch_size, "width": self.width,
            "n_train": self.n_train, "lr_step": self.lr_step,
        }.items() if v}
        try:
            return TrainConfig.recipe(
                self.kind, self.train_grid, loss=self.loss, sampling=self.sampling, m_cg=self.m_cg,
                modes=self.modes, layers=self.layers, basis=self.basis, dtype=self.dtype,
                seed=self.train_seed, data_seed=self.data_seed, **over)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["thresholds"] = list(self.thresholds)
        d["methods"] = list(self.methods)
        return d

    def digest(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:10]


# ---------------------------------------------------------------------------
# key = value config files


def _coerce(name: str, raw: str, ftype):
    raw = raw.strip()
    text = str(ftype)
    try:
        if "tuple" in text:
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(float(s) for s in items) if "float" in text else tuple(items)
        if "bool" in text:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in text:
            return int(raw)
        if "float" in text:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_assignments(lines, source: str = "<config>") -> dict[str, str]:
    out = {}
    for num, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{num}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | os.PathLike | None = None, overrides=()) -> ExperimentConfig:
    raw: dict[str, str] = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw.update(parse_assignments(fh, str(path)))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    raw.update(parse_assignments(overrides, "<override>"))
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    values = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value, fields[key].type)
    return ExperimentConfig(**values)


def format_config(config: ExperimentConfig) -> str:
    lines = []
    for k, v in config.to_dict().items():
        if isinstance(v, list):
            v = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def make_run_dir(root: str | os.PathLike, digest: str, label: str = "") -> str:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = os.path.join(root, f"{stamp}-{label + '-' if label else ''}{digest}")
    path, k = base, 1
    while os.path.exists(path):
        path, k = f"{base}.{k}", k + 1
    os.makedirs(path)
    return path


# ---------------------------------------------------------------------------
# training cache


def checkpoint_path(tc: TrainConfig, cache_dir: str | os.PathLike) -> str:
    """Cache location of a training config; logging settings do not change the key."""
    key = {k: v for k, v in tc.to_dict().items() if k not in ("log_every", "dump_dir")}
    return os.path.join(cache_dir, f"{tc.kind}-{tc.grid}-{tc.loss}-{tc.sampling}-{config_hash(key)}")


def ensure_checkpoint(tc: TrainConfig, cache_dir: str | os.PathLike, log=None) -> SnoParams:
    """Train once per distinct config and reuse the stored checkpoint."""
    path = checkpoint_path(tc, cache_dir)
    if os.path.exists(os.path.join(path, "meta.json")):
        return load_checkpoint(path)
    res = train(training_problems(tc), tc, log=log)
    tmp = path + ".tmp"
    save_checkpoint(res.params, tmp, {"train_config": tc.to_dict(), "train_seconds": res.seconds})
    res.write_curve(os.path.join(tmp, "training_curve.csv"))
    os.replace(tmp, path)
    return res.params


# ---------------------------------------------------------------------------
# benchmark


def test_problems(config: ExperimentConfig) -> list[ProblemInstance]:
    grid = GridDescriptor(config.grid)
    base = TEST_SEED_OFFSET * (1 + config.test_seed)
    return [make_instance(config.kind, grid, base + i) for i in range(config.n_test)]


@dataclass
class MethodResult:
    iterations: dict[float, list[int | None]] = field(default_factory=dict)
    records: list[str] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    skipped: bool = False

    def summary(self, tau: float) -> dict:
        its = self.iterations.get(tau, [])
        vals = np.array([math.inf if v is None else v for v in its], dtype=float)
        if vals.size == 0:
            return {"median": None, "min": None, "max": None, "not_converged": 0}
        return {
            "median": float(np.median(vals)),
            "min": float(vals.min()),
            "max": float(vals.max()),
            "not_converged": int(np.isinf(vals).sum()),
        }


@dataclass
class BenchReport:
    config: dict
    grid: int
    thresholds: list[float]
    methods: dict[str, MethodResult]
    label: str = ""

    def median(self, method: str, tau: float) -> float | None:
        """Median iterations; ``inf`` marks a NotConverged median."""
        m = self.methods[method]
        return None if m.skipped else m.summary(tau)["median"]

    def any_not_converged(self) -> bool:
        return any(m.summary(t)["not_converged"] for m in self.methods.values()
                   if not m.skipped for t in self.thresholds)

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "grid": self.grid,
            "thresholds": self.thresholds,
            "config": self.config,
            "methods": {
                name: {
                    "skipped": m.skipped,
                    "iterations": {repr(t): v for t, v in m.iterations.items()},
                    "summary": {repr(t): m.summary(t) for t in self.thresholds},
                    "records": m.records,
                    "failures": m.failures,
                }
                for name, m in self.methods.items()
            },
        }

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, default=_json_default)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "BenchReport":
        with open(path) as fh:
            d = json.load(fh)
        methods = {}
        for name, m in d["methods"].items():
            methods[name] = MethodResult(
                {float(t): v for t, v in m["iterations"].items()},
                m.get("records", []), m.get("failures", []), m.get("skipped", False))
        return cls(d["config"], d["grid"], [float(t) for t in d["thresholds"]], methods,
                   d.get("label", ""))

    def to_markdown(self) -> str:
        head = "| method | " + " | ".join(f"{t:.0e}" for t in self.thresholds) + " |"
        rule = "|---" * (len(self.thresholds) + 1) + "|"
        rows = [head, rule]
        for name, m in self.methods.items():
            cells = ["skipped"] * len(self.thresholds) if m.skipped else [
                _cell(m.summary(t)) for t in self.thresholds]
            rows.append(f"| {name} | " + " | ".join(cells) + " |")
        title = f"{self.label or self.config.get('kind', '')} grid {self.grid}"
        return f"### {title}\n\nmedian iterations to relative residual (min-max, NC = not converged)\n\n" \
               + "\n".join(rows) + "\n"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def _fmt(v: float) -> str:
    if v is None:
        return "-"
    if math.isinf(v):
        return "NC"
    return f"{v:g}"


def _cell(s: dict) -> str:
    if s["median"] is None:
        return "-"
    text = f"{_fmt(s['median'])} ({_fmt(s['min'])}-{_fmt(s['max'])})"
    if s["not_converged"]:
        text += f" [{s['not_converged']} NC]"
    return text


def run_method(problem: ProblemInstance, method: str, params: SnoParams | None, tol: float,
               max_iter: int, m_max: int, u_exact, seed: int) -> ConvergenceRecord:
    A, f = problem.matrix, problem.rhs
    if method == "CG":
        return cg(A, f, tol=tol, max_iter=max_iter, u_exact=u_exact, seed=seed)[1]
    B = SnoPreconditioner(params, problem.a) if method == "NO" else build_classical(method, A)
    return fcg(A, f, B, m_max=m_max, tol=tol, max_iter=max_iter, u_exact=u_exact, seed=seed)[1]


def _solve_instance(i: int, p: ProblemInstance, config: ExperimentConfig, params, names, tol,
                    rec_dir, out_dir):
    """All methods on one instance: {method: (iterations or None, record path, failure)}."""
    u_exact = reference_solve(p.matrix, p.rhs)
    seed = int(p.seed)
    out = {}
    for name in names:
        max_iter = config.no_max_iter() if name == "NO" else config.baseline_max_iter()
        try:
            rec = run_method(p, name, params, tol, max_iter, config.m_max, u_exact, seed)
        except FcgnoError as exc:
            # breakdowns count as not converged, the bench carries on
            out[name] = ([None] * len(config.thresholds), None,
                         f"instance {i}: {type(exc).__name__}: {exc}")
            continue
        its = [iterations_to_threshold(rec, t) for t in config.thresholds]
        path = None
        if rec_dir is not None:
            path = os.path.join(rec_dir, f"{_safe(name)}_{i:03d}.csv")
            rec.to_csv(path)
            path = os.path.relpath(path, out_dir)
        out[name] = (its, path, None)
    return out


def run_bench(config: ExperimentConfig, params: SnoParams | None = None,
              out_dir: str | os.PathLike | None = None, problems=None, log=None) -> BenchReport:
    """Solve every test instance with every method and collect iteration counts.

    Instances run on ``config.workers`` threads; results are gathered in
    instance order so reports do not depend on scheduling.
    """
    problems = test_problems(config) if problems is None else problems
    tol = min(config.thresholds)
    methods = {name: MethodResult({t: [] for t in config.thresholds}) for name in config.methods}
    if "NO" in methods and params is None:
        methods["NO"].skipped = True
    names = [k for k, m in methods.items() if not m.skipped]
    rec_dir = None
    if out_dir is not None:
        rec_dir = os.path.join(out_dir, "records")
        os.makedirs(rec_dir, exist_ok=True)

    def job(i):
        res = _solve_instance(i, problems[i], config, params, names, tol, rec_dir, out_dir)
        if log is not None:
            log(f"instance {i + 1}/{len(problems)} done")
        return res

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(job, range(len(problems))))
    else:
        results = [job(i) for i in range(len(problems))]
    for per_instance in results:
        for name, (its, path, failure) in per_instance.items():
            res = methods[name]
            for t, v in zip(config.thresholds, its):
                res.iterations[t].append(v)
            if path is not None:
                res.records.append(path)
            if failure is not None:
                res.failures.append(failure)
    label = f"{config.kind} {config.loss} {config.sampling} train {config.train_grid}"
    return BenchReport(config.to_dict(), config.grid, list(config.thresholds), methods, label)


def _safe(name: str) -> str:
    return name.replace("(", "").replace(")", "").replace(" ", "_")


# ---------------------------------------------------------------------------
# reports


def side_by_side(reports: list[BenchReport], method: str | None = None) -> str:
    """One table, one column group per report; rows are methods then thresholds."""
    names = []
    for r in reports:
        for m in r.methods:
            if m not in names and (method is None or m == method):
                names.append(m)
    thresholds = reports[0].thresholds
    labels = [r.label or f"report {k}" for k, r in enumerate(reports)]
    head = "| method | threshold | " + " | ".join(labels) + " |"
    rows = [head, "|---" * (len(reports) + 2) + "|"]
    for name in names:
        for t in thresholds:
            cells = []
            for r in reports:
                m = r.methods.get(name)
                if m is None or m.skipped:
                    cells.append("skipped")
                else:
                    cells.append(_cell(m.summary(t)))
            rows.append(f"| {name} | {t:.0e} | " + " | ".join(cells) + " |")
    return "\n".join(rows) + "\n"


def figure_series(report: BenchReport, base_dir: str | os.PathLike, instance: int = 0) -> dict:
    """Per-method (iteration, rel_residual, epsilon) series of one test instance."""
    out = {}
    for name, m in report.methods.items():
        if m.skipped:
            continue
        match = [p for p in m.records if p.endswith(f"_{instance:03d}.csv")]
        if match:
            out[name] = ConvergenceRecord.from_csv(os.path.join(base_dir, match[0]))
    return out


def write_figure_csv(series: dict[str, ConvergenceRecord], path: str | os.PathLike,
                     column: str) -> None:
    names = list(series)
    length = max((len(r) for r in series.values()), default=0)
    with open(path, "w") as fh:
        fh.write("iter," + ",".join(names) + "\n")
        for i in range(length):
            vals = []
            for n in names:
                col = getattr(series[n], column)
                vals.append(repr(col[i]) if i < len(col) else "")
            fh.write(f"{i}," + ",".join(vals) + "\n")


# ---------------------------------------------------------------------------
# reference runs

REFERENCE_RUNS = {
    "poisson-notay": dict(kind="poisson", grid=32, loss="notay", sampling="krylov"),
    "diffusion-krylov": dict(kind="diffusion", grid=32, loss="notay", sampling="krylov"),
    "diffusion-random": dict(kind="diffusion", grid=32, loss="notay", sampling="random"),
    "poisson-l2": dict(kind="poisson", grid=32, loss="l2", sampling="krylov"),
    # halved schedule so the grid-16 check fits in a few minutes
    "smoke16": dict(kind="poisson", grid=16, loss="notay", sampling="krylov", epochs=80, lr_step=20),
}


def reference_config(name: str, **overrides) -> TrainConfig:
    """Recipe training config of a named reference run."""
    spec = dict(REFERENCE_RUNS[name])
    spec.update(overrides)
    return TrainConfig.recipe(spec.pop("kind"), spec.pop("grid"), **spec)

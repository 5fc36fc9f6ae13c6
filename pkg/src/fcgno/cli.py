"""Command-line entry point: ``fcgno gen-data | train | bench | report``."""

from __future__ import annotations

import argparse
import os
import sys

from .errors import ConfigError, FcgnoError, FormatError

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_CONFIG, EXIT_FAILURE = 0, 1, 2, 3


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _run_dir(config, label: str) -> str:
    from .bench import format_config, make_run_dir

    path = make_run_dir(config.output_root, config.digest(), label)
    with open(os.path.join(path, "config.txt"), "w") as fh:
        fh.write(format_config(config))
    return path


def cmd_gen_data(args) -> int:
    from .bench import load_config
    from .training import generate_dataset, save_dataset, training_problems

    config = load_config(args.config, args.set)
    tc = config.train_config()
    out = _run_dir(config, "data")
    problems = training_problems(tc)
    samples = generate_dataset(problems, tc.sampling, tc.m_cg, tc.data_seed)
    save_dataset(out, problems, samples, {
        "kind": tc.kind, "sampling": tc.sampling, "m_cg": tc.m_cg, "data_seed": tc.data_seed,
        "problem_seeds": [p.seed for p in problems], "trig_spec": {"n1": 5, "n2": 5, "alpha": 2.0},
    })
    _log(f"{len(samples)} samples from {len(problems)} problems")
    print(out)
    return EXIT_OK


def cmd_train(args) -> int:
    from .bench import load_config
    from .spectral import save_checkpoint
    from .training import load_dataset, train

    config = load_config(args.config, args.set)
    tc = config.train_config()
    problems, samples, meta = load_dataset(args.data)
    if meta.get("grid") != tc.grid or meta.get("kind", tc.kind) != tc.kind:
        raise ConfigError(
            f"dataset is {meta.get('kind')} grid {meta.get('grid')}, config wants {tc.kind} grid {tc.grid}"
        )
    out = _run_dir(config, "train")
    res = train(problems, tc, samples=samples, log=_log)
    ckpt = os.path.join(out, "checkpoint")
    save_checkpoint(res.params, ckpt, {"train_config": tc.to_dict(), "train_seconds": res.seconds,
                                       "dataset": os.path.abspath(args.data)})
    res.write_curve(os.path.join(out, "training_curve.csv"))
    _log(f"final loss {res.curve[-1][1]:.5f} after {res.seconds:.0f}s")
    print(ckpt)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import load_config, run_bench
    from .spectral import load_checkpoint

    config = load_config(args.config, args.set)
    params = load_checkpoint(args.checkpoint) if args.checkpoint else None
    out = _run_dir(config, "bench")
    report = run_bench(config, params, out, log=_log)
    report.save(os.path.join(out, "report.json"))
    md = report.to_markdown()
    if params is None and "NO" in config.methods:
        md += "\nNO column skipped: no checkpoint given.\n"
    with open(os.path.join(out, "report.md"), "w") as fh:
        fh.write(md)
    print(md)
    print(out)
    if args.strict and report.any_not_converged():
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_report(args) -> int:
    from .bench import BenchReport, figure_series, side_by_side, write_figure_csv

    reports, bases = [], []
    for p in args.paths:
        path = os.path.join(p, "report.json") if os.path.isdir(p) else p
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing report: {path}")
        reports.append(BenchReport.load(path))
        bases.append(os.path.dirname(os.path.abspath(path)))
    out = args.out or os.path.join(bases[0], "figures")
    os.makedirs(out, exist_ok=True)
    text = "\n".join(r.to_markdown() for r in reports)
    if len(reports) > 1:
        text += "\n### side by side\n\n" + side_by_side(reports)
    for k, (r, base) in enumerate(zip(reports, bases)):
        series = figure_series(r, base)
        write_figure_csv(series, os.path.join(out, f"report{k}_rel_residual.csv"), "rel_residual")
        write_figure_csv(series, os.path.join(out, f"report{k}_epsilon.csv"), "epsilon")
    with open(os.path.join(out, "tables.md"), "w") as fh:
        fh.write(text)
    print(text)
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fcgno", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="key = value experiment file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (repeatable)")

    p = sub.add_parser("gen-data", help="generate and store training problems and samples")
    common(p)
    p.set_defaults(func=cmd_gen_data)
    p = sub.add_parser("train", help="train the operator on a stored dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("bench", help="compare solvers on fresh test problems")
    common(p)
    p.add_argument("--checkpoint", help="trained operator checkpoint directory")
    p.add_argument("--strict", action="store_true", help="exit 1 if any run did not converge")
    p.set_defaults(func=cmd_bench)
    p = sub.add_parser("report", help="render tables and figure data from bench reports")
    p.add_argument("paths", nargs="+", help="report.json files or bench run directories")
    p.add_argument("--out", help="output directory (default: next to the first report)")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        # bad configs and unusable inputs share the configuration exit code
        _log(f"configuration error: {exc}")
        return EXIT_CONFIG
    except (FcgnoError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

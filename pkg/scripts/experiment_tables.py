"""Render the comparison tables from cached reference checkpoints.

Run scripts/pretrain.py first; missing checkpoints are trained on demand.
Writes one markdown file with a section per experiment and keeps the
per-instance convergence records next to it.
"""

from __future__ import annotations

import argparse
import os
import sys

import torch

from fcgno.bench import ExperimentConfig, ensure_checkpoint, reference_config, run_bench, side_by_side

EXPERIMENTS = [
    # (title, reference run, bench settings)
    ("Poisson 32, all methods", "poisson-notay", dict(kind="poisson", train_grid=32)),
    ("Poisson 32 -> 64", "poisson-notay",
     dict(kind="poisson", train_grid=32, test_grid=64, allow_large=True)),
    ("Poisson 32, L2 loss", "poisson-l2", dict(kind="poisson", train_grid=32, loss="l2", methods=("NO",))),
    ("Diffusion 32, Krylov data", "diffusion-krylov", dict(kind="diffusion", train_grid=32)),
    ("Diffusion 32, random data", "diffusion-random",
     dict(kind="diffusion", train_grid=32, sampling="random", methods=("NO",))),
]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cache", default=os.environ.get("FCGNO_CACHE", ".cache"))
    ap.add_argument("--out", default="runs/tables")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)
    torch.set_num_threads(1)
    os.makedirs(args.out, exist_ok=True)
    sections, reports = [], {}
    for title, run, settings in EXPERIMENTS:
        print(f"{title} ...", flush=True)
        params = ensure_checkpoint(reference_config(run), args.cache, log=print)
        cfg = ExperimentConfig(workers=args.workers, **settings)
        sub = os.path.join(args.out, title.replace(" ", "_").replace(",", "").replace(">", ""))
        os.makedirs(sub, exist_ok=True)
        rep = run_bench(cfg, params, sub)
        rep.label = title
        rep.save(os.path.join(sub, "report.json"))
        reports[title] = rep
        sections.append(f"## {title}\n\n{rep.to_markdown()}")
    sections.append("## Loss ablation (NO)\n\n" + side_by_side(
        [reports["Poisson 32, all methods"], reports["Poisson 32, L2 loss"]], "NO"))
    sections.append("## Sampling ablation (NO)\n\n" + side_by_side(
        [reports["Diffusion 32, Krylov data"], reports["Diffusion 32, random data"]], "NO"))
    path = os.path.join(args.out, "tables.md")
    with open(path, "w") as fh:
        fh.write("\n\n".join(sections) + "\n")
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Train and cache the checkpoints used by the acceptance tests.

Runs one training job at a time (the recipes are single-threaded) and
stores each result under the cache directory keyed by its config hash, so
the acceptance suite only loads them.  Already cached jobs are skipped.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import torch

from fcgno.bench import REFERENCE_RUNS, ensure_checkpoint, reference_config


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("jobs", nargs="*", help=f"subset of {sorted(REFERENCE_RUNS)} (default: all)")
    ap.add_argument("--cache", default=os.environ.get("FCGNO_CACHE", ".cache"))
    args = ap.parse_args(argv)
    unknown = set(args.jobs) - set(REFERENCE_RUNS)
    if unknown:
        ap.error(f"unknown runs: {sorted(unknown)}")
    torch.set_num_threads(1)
    for name in args.jobs or list(REFERENCE_RUNS):
        t0 = time.perf_counter()
        print(f"[{name}] start", flush=True)
        ensure_checkpoint(reference_config(name, log_every=10), args.cache,
                          log=lambda m, name=name: print(f"[{name}] {m}", flush=True))
        print(f"[{name}] done in {time.perf_counter() - t0:.0f}s", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Default-config crystallization run: train 2000 steps on counting, then evaluate.

Writes config.json, metrics.csv, model.cryl and summary.json under --out/a and
prints the summary. Pass --repeat to train a second time into --out/b and
compare the two metrics CSVs byte for byte.
"""
import argparse
import dataclasses
import filecmp
import json
import os
import sys
from pathlib import Path

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, os.environ.get("CRYSTAL_THREADS", "1"))

from crystal.config import RunConfig  # noqa: E402
from crystal.experiment import run_experiment  # noqa: E402


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="run config JSON (default: built-in defaults)")
    ap.add_argument("--out", default="runs/crystallization")
    ap.add_argument("--steps", type=int, help="override the step count")
    ap.add_argument("--repeat", action="store_true", help="train twice and compare metrics bitwise")
    args = ap.parse_args(argv)

    run = RunConfig.load(args.config) if args.config else RunConfig()
    if args.steps is not None:
        run = dataclasses.replace(run, train=dataclasses.replace(run.train, steps=args.steps))
    out = Path(args.out)
    summary = run_experiment(run, out / "a", log_every=100)
    if args.repeat:
        run_experiment(run, out / "b")
        summary["metrics_identical"] = filecmp.cmp(out / "a" / "metrics.csv", out / "b" / "metrics.csv", shallow=False)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())

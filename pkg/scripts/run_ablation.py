"""Run the ablation grids at a reduced step count and print a markdown table.

    python scripts/run_ablation.py --grid all --steps 400 --out runs/ablation.csv
"""
import argparse
import json
import os
import sys

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, os.environ.get("CRYSTAL_THREADS", "1"))

from crystal.ablation import DEFAULT_STEPS, REPORT_HEADER, directional_summary, ordering_holds, run_grid  # noqa: E402
from crystal.config import RunConfig  # noqa: E402


def markdown(rows) -> str:
    lines = ["| " + " | ".join(REPORT_HEADER) + " | ordered |", "|" + "---|" * (len(REPORT_HEADER) + 1)]
    for r in rows:
        cells = [r["grid"], r["cell"]] + [f"{r[k]:.3f}" for k in REPORT_HEADER[2:]]
        lines.append("| " + " | ".join(cells) + f" | {'yes' if ordering_holds(r) else 'no'} |")
    return "\n".join(lines)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", choices=("token", "loss", "corruption", "all"), default="all")
    ap.add_argument("--config")
    ap.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    ap.add_argument("--out", default="runs/ablation.csv")
    args = ap.parse_args(argv)

    run = RunConfig.load(args.config) if args.config else RunConfig()
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    rows = run_grid(args.grid, run, steps=args.steps, out_path=args.out,
                    progress=lambda r: print(f"{r['grid']}/{r['cell']}: {r['acc_intact']:.3f}", file=sys.stderr, flush=True))
    print(markdown(rows))
    print(json.dumps(directional_summary(rows), indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: gen, corrupt, train, eval, ablate, gradcheck.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


def _cap_threads() -> None:
    # must run before numpy loads its BLAS
    n = os.environ.get("CRYSTAL_THREADS", "1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS"):
        os.environ.setdefault(var, n)


class UsageError(Exception):
    pass


def _parse_mix(text: str):
    """``count=1.0,exist=0`` or three comma-separated weights."""
    from .taskgen import parse_mix

    parts = [p for p in text.split(",") if p]
    if all("=" in p for p in parts):
        return parse_mix({k.strip(): float(v) for k, v in (p.split("=", 1) for p in parts)})
    return parse_mix(tuple(float(p) for p in parts))


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    from .ppm import write_ppm
    from .taskgen import VOCAB, make_split

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = make_split(args.seed, args.n, _parse_mix(args.mix), split=args.split)
    lines = []
    for i, s in enumerate(samples):
        name = f"{i:06d}.ppm"
        write_ppm(out / name, s.image)
        rec = {
            "image": name,
            "question": " ".join(VOCAB.decode(s.question)),
            "answer": s.answer_text(),
            "kind": s.kind,
            "seed": s.seed,
        }
        lines.append(json.dumps(rec, sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_corrupt(args) -> int:
    from .corruption import LEVELS, CorruptionSpec, corrupt
    from .ppm import from_bytes, to_bytes

    raw = Path(args.inp).read_bytes()
    image = from_bytes(raw)
    if args.mode == "identity":
        Path(args.out).write_bytes(raw)
        return EXIT_OK
    if args.level is None:
        raise UsageError(f"--level is required for {args.mode}; ladder {list(LEVELS[args.mode])}")
    spec = CorruptionSpec(args.mode, float(args.level), args.seed, LEVELS[args.mode])
    Path(args.out).write_bytes(to_bytes(corrupt(image, spec)))
    return EXIT_OK


def _load_run(path):
    from .config import RunConfig

    return RunConfig.load(path)


def cmd_train(args) -> int:
    from .model import TinyVLM, save_checkpoint
    from .taskgen import make_split
    from .trainer import train

    run = _load_run(args.config)
    out = Path(args.out or run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run.save(out / "config.json")
    data = make_split(run.data_seed, run.n_train, run.mix)
    model = TinyVLM(run.model)

    def progress(row):
        if args.verbose and (row["step"] + 1) % 100 == 0:
            print(f"step {row['step'] + 1} total {row['total']:.4f}", file=sys.stderr)

    train(model, data, run.train, run.loss, log_path=out / "metrics.csv", progress=progress)
    save_checkpoint(out / "model.cryl", model)
    print(str(out / "model.cryl"))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .corruption import LEVELS, CorruptionSpec
    from .model import load_checkpoint
    from .taskgen import make_split
    from .trainer import chance_level, evaluate_all

    run = _load_run(args.config)
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(run.out_dir) / "model.cryl"
    model = load_checkpoint(ckpt)
    data = make_split(run.data_seed, run.n_eval, run.mix, split="eval")
    spec = CorruptionSpec(args.mode, args.level, args.seed, LEVELS[args.mode])
    acc = evaluate_all(model, data, spec)
    print(json.dumps({**acc, "chance": chance_level(data), "n": len(data)}, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import directional_summary, run_grid

    run = _load_run(args.config) if args.config else None
    if run is None:
        from .config import RunConfig

        run = RunConfig()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def progress(row):
        print(",".join(str(row[k]) for k in row), file=sys.stderr)

    rows = run_grid(args.grid, run, steps=args.steps, out_path=out, progress=progress)
    print(json.dumps(directional_summary(rows), sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    failed = []
    for r in run_all(args.seed):
        flag = "ok" if r.passed else "FAIL"
        print(f"{r.op:40s} {r.max_rel_err:.3e} {flag}")
        if not r.passed:
            failed.append(r)
    if failed:
        for r in failed:
            print(f"gradient check failed: {r.op} at {r.worst} (rel err {r.max_rel_err:.3e})", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    from .corruption import MODES

    p = argparse.ArgumentParser(prog="crystal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write synthetic VQA samples as PPM plus manifest.jsonl")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--mix", default="count=1.0")
    g.add_argument("--split", choices=("train", "eval"), default="train")
    g.set_defaults(fn=cmd_gen)

    c = sub.add_parser("corrupt", help="apply one corruption primitive to a P6 image")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--mode", choices=MODES, required=True)
    c.add_argument("--level", type=float)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_corrupt)

    t = sub.add_parser("train", help="train from a run config; writes checkpoint and metrics CSV")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (default: out_dir from the config)")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="print per-condition accuracies as JSON")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--mode", choices=[m for m in MODES if m != "identity"], default="blur")
    e.add_argument("--level", type=float, default=10.0)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation grid at reduced step count")
    a.add_argument("--grid", choices=("token", "loss", "corruption", "all"), required=True)
    a.add_argument("--config")
    a.add_argument("--steps", type=int, default=None)
    a.add_argument("--out", default="ablation.csv")
    a.set_defaults(fn=cmd_ablate)

    k = sub.add_parser("gradcheck", help="finite-difference check of every op and the dual-path step")
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    _cap_threads()
    from .errors import CrystalError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if getattr(args, "steps", 0) is None:
        from .ablation import DEFAULT_STEPS

        args.steps = DEFAULT_STEPS
    try:
        return args.fn(args)
    except (UsageError, CrystalError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"crystal {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

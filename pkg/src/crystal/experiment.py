"""One end-to-end run: build data, train, checkpoint, evaluate, summarise."""
from __future__ import annotations

import json
import sys
import time
from pathlib import Path

from .config import RunConfig
from .model import TinyVLM, save_checkpoint
from .taskgen import make_split
from .trainer import chance_level, evaluate_all, train


def run_experiment(run: RunConfig, out, log_every: int = 0) -> dict:
    """Train ``run`` into ``out`` and return the summary also written to summary.json.

    Timings cover training plus evaluation; data generation is excluded.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    run.save(out / "config.json")
    train_set = make_split(run.data_seed, run.n_train, run.mix)
    eval_set = make_split(run.data_seed, run.n_eval, run.mix, split="eval")
    model = TinyVLM(run.model)
    t0 = time.perf_counter()

    def progress(row):
        if log_every and (row["step"] + 1) % log_every == 0:
            print(f"step {row['step'] + 1:5d}  ce_int {row['ce_int']:.4f}  ce_cor {row['ce_cor']:.4f}  "
                  f"kl {row['kl']:.4f}  attn {row['attn']:.4f}  {time.perf_counter() - t0:.0f}s",
                  file=sys.stderr, flush=True)

    rows = train(model, train_set, run.train, run.loss, log_path=out / "metrics.csv", progress=progress)
    train_seconds = time.perf_counter() - t0
    save_checkpoint(out / "model.cryl", model)
    acc = evaluate_all(model, eval_set)
    head = [r["ce_int"] for r in rows[:100]]
    tail = [r["ce_int"] for r in rows[-100:]]
    summary = {
        **acc,
        "chance": chance_level(eval_set),
        "train_seconds": train_seconds,
        "total_seconds": time.perf_counter() - t0,
        "ce_int_first100": sum(head) / max(len(head), 1),
        "ce_int_last100": sum(tail) / max(len(tail), 1),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary

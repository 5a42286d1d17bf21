"""Reduced-budget ablation grids: latent tokens, loss terms, corruption modes.

Every cell trains a fresh model from the same seed with one setting changed
and reports accuracy under the four evaluation conditions. The corrupted
conditions always use blur at the top of its ladder, so cells in the
corruption grid differ only in what they were trained with.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from typing import Callable

from .config import RunConfig
from .model import TinyVLM
from .taskgen import make_split
from .trainer import CONDITIONS, evaluate_all, train

GRIDS = ("token", "loss", "corruption")
REPORT_HEADER = ("grid", "cell", "acc_intact", "acc_cor_lat", "acc_cor_nolat", "acc_blind")
DEFAULT_STEPS = 400


@dataclass(frozen=True)
class Cell:
    grid: str
    name: str
    run: RunConfig


def _replace(run: RunConfig, *, model=None, loss=None, train_=None) -> RunConfig:
    return dataclasses.replace(
        run,
        model=dataclasses.replace(run.model, **(model or {})),
        loss=dataclasses.replace(run.loss, **(loss or {})),
        train=dataclasses.replace(run.train, **(train_ or {})),
    )


def token_cells(run: RunConfig) -> list[Cell]:
    return [
        Cell("token", f"K={k},{mode}", _replace(run, model={"n_latents": k, "latent_mode": mode}))
        for mode in ("identical", "diverse")
        for k in (4, 8, 16)
    ]


LOSS_ROWS: dict[str, dict] = {
    "+ Cor. CE": {"w_kl": 0.0, "w_attn": 0.0},
    "+ Cor. CE + KL": {"w_attn": 0.0},
    "+ Cor. CE + Att. Align": {"w_kl": 0.0},
    "+ All": {},
    "Answer to All (KL)": {"attn_variant": "answer_to_all_kl"},
    "Answer to Latents (KL)": {"attn_variant": "answer_to_latents_kl"},
    "Answer to Latents (MSE)": {"attn_variant": "answer_to_latents_mse"},
}


def loss_cells(run: RunConfig) -> list[Cell]:
    base = {"w_ce_int": 1.0, "w_ce_cor": 1.0, "w_kl": 1.0, "w_attn": 1.0, "attn_variant": "answer_to_latents_kl"}
    return [Cell("loss", name, _replace(run, loss={**base, **delta})) for name, delta in LOSS_ROWS.items()]


CORRUPTION_ROWS = {
    "Gaussian Blur": "blur",
    "Random Mask": "mask",
    "Jigsaw Shuffling": "jigsaw",
    "Gaussian Noise": "noise",
    "Colour Distortion": "color",
}


def corruption_cells(run: RunConfig) -> list[Cell]:
    return [
        Cell("corruption", name, _replace(run, train_={"corruption": mode, "levels": None}))
        for name, mode in CORRUPTION_ROWS.items()
    ]


def cells(grid: str, run: RunConfig) -> list[Cell]:
    table = {"token": token_cells, "loss": loss_cells, "corruption": corruption_cells}
    if grid == "all":
        return [c for g in GRIDS for c in table[g](run)]
    return table[grid](run)


def run_cell(cell: Cell, steps: int, train_set=None, eval_set=None) -> dict[str, float]:
    run = _replace(cell.run, train_={"steps": steps})
    train_set = train_set or make_split(run.data_seed, run.n_train, run.mix)
    eval_set = eval_set or make_split(run.data_seed, run.n_eval, run.mix, split="eval")
    model = TinyVLM(run.model)
    train(model, train_set, run.train, run.loss)
    return evaluate_all(model, eval_set)


def report_row(cell: Cell, acc: dict[str, float]) -> dict:
    cols = dict(zip(REPORT_HEADER[2:], (acc[c] for c in CONDITIONS)))
    return {"grid": cell.grid, "cell": cell.name, **cols}


def run_grid(
    grid: str,
    run: RunConfig,
    steps: int = DEFAULT_STEPS,
    out_path=None,
    progress: Callable[[dict], None] | None = None,
) -> list[dict]:
    train_set = make_split(run.data_seed, run.n_train, run.mix)
    eval_set = make_split(run.data_seed, run.n_eval, run.mix, split="eval")
    rows = []
    for cell in cells(grid, run):
        row = report_row(cell, run_cell(cell, steps, train_set, eval_set))
        rows.append(row)
        if progress is not None:
            progress(row)
    if out_path is not None:
        write_report(out_path, rows)
    return rows


def write_report(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([r[k] if k in ("grid", "cell") else repr(r[k]) for k in REPORT_HEADER])


def ordering_holds(row: dict) -> bool:
    return row["acc_intact"] >= row["acc_cor_lat"] >= row["acc_cor_nolat"]


def directional_summary(rows: list[dict], tie: float = 0.02) -> dict[str, bool | None]:
    """Directional checks on the cell ranking; reported, never gated."""
    by = {(r["grid"], r["cell"]): r for r in rows}
    out: dict[str, bool | None] = {}
    d, i = by.get(("token", "K=8,diverse")), by.get(("token", "K=8,identical"))
    out["diverse>=identical@K=8"] = None if d is None or i is None else d["acc_intact"] >= i["acc_intact"] - tie
    corr = [r for r in rows if r["grid"] == "corruption"]
    blur = by.get(("corruption", "Gaussian Blur"))
    out["blur_best_or_tied"] = (
        None if blur is None else blur["acc_intact"] >= max(r["acc_intact"] for r in corr) - tie
    )
    full, ce = by.get(("loss", "+ All")), by.get(("loss", "+ Cor. CE"))
    out["all>=cor_ce_only"] = None if full is None or ce is None else full["acc_intact"] >= ce["acc_intact"] - tie
    return out

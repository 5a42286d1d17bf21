import csv
import dataclasses

import pytest

from crystal.ablation import (
    CORRUPTION_ROWS, LOSS_ROWS, REPORT_HEADER, cells, directional_summary, ordering_holds, run_grid,
)
from crystal.config import RunConfig
from crystal.model import ModelConfig


def test_grid_sizes():
    run = RunConfig()
    assert len(cells("token", run)) == 6
    assert len(cells("loss", run)) == len(LOSS_ROWS) >= 4
    assert "+ All" in LOSS_ROWS
    assert len(cells("corruption", run)) == 5
    assert len(cells("all", run)) == 6 + len(LOSS_ROWS) + 5


def test_cells_change_one_setting():
    run = RunConfig()
    tok = {c.name: c.run for c in cells("token", run)}
    assert tok["K=16,identical"].model.n_latents == 16
    assert tok["K=16,identical"].model.latent_mode == "identical"
    assert tok["K=4,diverse"].loss == run.loss
    loss = {c.name: c.run.loss for c in cells("loss", run)}
    assert loss["+ Cor. CE"].w_kl == 0 and loss["+ Cor. CE"].w_attn == 0
    assert loss["+ All"].w_kl == loss["+ All"].w_attn == 1.0
    assert loss["Answer to Latents (MSE)"].attn_variant == "answer_to_latents_mse"
    modes = [c.run.train.corruption for c in cells("corruption", run)]
    assert modes == list(CORRUPTION_ROWS.values())


def test_ordering_invariant():
    assert ordering_holds({"acc_intact": 0.9, "acc_cor_lat": 0.5, "acc_cor_nolat": 0.5})
    assert not ordering_holds({"acc_intact": 0.4, "acc_cor_lat": 0.5, "acc_cor_nolat": 0.2})


def test_directional_summary_ties_and_missing():
    rows = [
        {"grid": "token", "cell": "K=8,diverse", "acc_intact": 0.50},
        {"grid": "token", "cell": "K=8,identical", "acc_intact": 0.51},
        {"grid": "corruption", "cell": "Gaussian Blur", "acc_intact": 0.40},
        {"grid": "corruption", "cell": "Random Mask", "acc_intact": 0.60},
    ]
    s = directional_summary(rows)
    assert s["diverse>=identical@K=8"] is True
    assert s["blur_best_or_tied"] is False
    assert s["all>=cor_ce_only"] is None


def test_tiny_grid_report(tmp_path):
    run = RunConfig(
        model=ModelConfig(n_layers=1, n_heads=2, d_model=16, n_latents=2),
        n_train=8, n_eval=6,
    )
    out = tmp_path / "corr.csv"
    rows = run_grid("corruption", run, steps=1, out_path=out)
    assert [r["cell"] for r in rows] == list(CORRUPTION_ROWS)
    with open(out) as fh:
        table = list(csv.reader(fh))
    assert tuple(table[0]) == REPORT_HEADER
    assert len(table) == 6
    for r in rows:
        for k in REPORT_HEADER[2:]:
            assert 0.0 <= r[k] <= 1.0
    assert float(table[1][2]) == rows[0]["acc_intact"]

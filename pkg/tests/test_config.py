import json

import pytest

from crystal.config import RunConfig
from crystal.errors import ContractError
from crystal.model import ModelConfig
from crystal.trainer import LossConfig, TrainConfig


def test_defaults_match_reference_setup():
    run = RunConfig()
    assert (run.model.n_layers, run.model.d_model, run.model.n_heads, run.model.n_latents) == (4, 128, 4, 8)
    assert run.model.latent_mode == "diverse"
    assert (run.train.steps, run.train.batch_size, run.train.corruption) == (2000, 8, "blur")
    assert (run.loss.w_ce_int, run.loss.w_ce_cor, run.loss.w_kl, run.loss.w_attn) == (1.0, 1.0, 1.0, 1.0)
    assert run.mix == (1.0, 0.0, 0.0)


def test_json_round_trip():
    run = RunConfig(
        model=ModelConfig(n_layers=2, d_model=32, n_latents=4),
        loss=LossConfig(w_kl=0.5, layers=(0, 1)),
        train=TrainConfig(steps=10, levels=(5.0, 10.0)),
        mix=(0.5, 0.25, 0.25),
        n_train=20,
    )
    back = RunConfig.from_json(run.to_json())
    assert back == run
    assert back.to_json() == run.to_json()


def test_canonical_json_is_sorted_and_compact():
    text = RunConfig().to_json()
    assert text == json.dumps(json.loads(text), sort_keys=True, separators=(",", ":"))


def test_partial_config_uses_defaults():
    run = RunConfig.from_dict({"train": {"steps": 5}, "mix": {"count": 1.0}})
    assert run.train.steps == 5
    assert run.train.lr == TrainConfig().lr
    assert run.model == ModelConfig()


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"model": {"d_modle": 64}},
    {"loss": {"w_all": 1.0}},
    {"train": {"epochs": 3}},
])
def test_unknown_keys_rejected(doc):
    with pytest.raises(ContractError, match="unknown"):
        RunConfig.from_dict(doc)


def test_invalid_values_rejected():
    with pytest.raises(ContractError):
        RunConfig.from_dict({"train": {"corruption": "identity"}})
    with pytest.raises(ContractError, match="ladder"):
        RunConfig.from_dict({"train": {"levels": [3.0]}})
    with pytest.raises(ContractError):
        RunConfig.from_dict({"n_train": 0})
    with pytest.raises(ContractError):
        RunConfig.from_json("{not json")


def test_save_load(tmp_path):
    run = RunConfig(n_eval=17)
    run.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json") == run
    assert run.mix_dict() == {"count": 1.0, "exist": 0.0, "relation": 0.0}

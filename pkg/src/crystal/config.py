"""Run configuration: one JSON file drives train, eval and ablate."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .corruption import LEVELS, MODES
from .errors import ContractError
from .model import ModelConfig, canonical_json
from .taskgen import KINDS, parse_mix
from .trainer import LossConfig, TrainConfig


def _strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ContractError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ContractError(f"unknown {where} keys {sorted(unknown)}")
    return d


def _tuplify(d: dict, keys) -> dict:
    return {k: (tuple(v) if k in keys and isinstance(v, list) else v) for k, v in d.items()}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_train: int = 4000
    n_eval: int = 300
    mix: tuple[float, float, float] = (1.0, 0.0, 0.0)
    data_seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.n_train < 1 or self.n_eval < 1:
            raise ContractError("n_train and n_eval must be >= 1")
        object.__setattr__(self, "mix", parse_mix(self.mix))
        mode = self.train.corruption
        if mode not in MODES or mode == "identity":
            raise ContractError(f"training corruption must be one of {[m for m in MODES if m != 'identity']}")
        if self.train.levels is not None:
            bad = [v for v in self.train.levels if float(v) not in LEVELS[mode]]
            if bad:
                raise ContractError(f"levels {bad} not on the {mode} ladder {list(LEVELS[mode])}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(_strict(cls, d, "run config"))
        if "model" in d:
            d["model"] = ModelConfig(**_strict(ModelConfig, d["model"], "model"))
        if "loss" in d:
            d["loss"] = LossConfig(**_tuplify(_strict(LossConfig, d["loss"], "loss"), ("layers",)))
        if "train" in d:
            d["train"] = TrainConfig(**_tuplify(_strict(TrainConfig, d["train"], "train"), ("levels", "betas")))
        if isinstance(d.get("mix"), dict):
            d["mix"] = parse_mix(d["mix"])
        elif "mix" in d:
            d["mix"] = tuple(d["mix"])
        try:
            return cls(**d)
        except TypeError as exc:  # wrong value types inside nested configs
            raise ContractError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ContractError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def mix_dict(self) -> dict[str, float]:
        return dict(zip(KINDS, self.mix))

"""Dual-path consistency training.

One step runs the intact forward on the clean image, corrupts the image, runs
the corrupted forward with every layer's latent rows overwritten by the intact
latents, and combines four losses::

    total = w_ce_int * ce_int + w_ce_cor * ce_cor + w_kl * kl + w_attn * attn

All four live in one graph, so corrupted-path gradients reach the intact path
through the copied latents.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .corruption import CorruptionSpec, corrupt, sample_spec
from .errors import ContractError, TrainingDiverged
from .model import ModelConfig, TinyVLM, Trace, build_sequence
from .taskgen import QASample
from .tensor import Tensor

ATTN_VARIANTS = ("answer_to_latents_kl", "answer_to_latents_mse", "answer_to_all_kl")
TERMS = ("ce_int", "ce_cor", "kl", "attn")
CONDITIONS = ("intact", "corrupted_with_latents", "corrupted_no_latents", "blind")
METRICS_HEADER = ("step", "ce_int", "ce_cor", "kl", "attn", "total", "lr", "seed")


@dataclass(frozen=True)
class LossConfig:
    w_ce_int: float = 1.0
    w_ce_cor: float = 1.0
    w_kl: float = 1.0
    w_attn: float = 1.0
    attn_variant: str = "answer_to_latents_kl"
    layers: tuple[int, ...] | None = None  # None = every layer
    teacher_detach: bool = True

    def __post_init__(self):
        if min(self.weights) < 0:
            raise ContractError("loss weights must be >= 0")
        if self.attn_variant not in ATTN_VARIANTS:
            raise ContractError(f"attn_variant must be one of {ATTN_VARIANTS}")
        if self.layers is not None and len(self.layers) == 0:
            raise ContractError("layer subset must be non-empty")

    @property
    def weights(self) -> tuple[float, float, float, float]:
        return (self.w_ce_int, self.w_ce_cor, self.w_kl, self.w_attn)


@dataclass
class LossBreakdown:
    ce_int: float
    ce_cor: float
    kl: float
    attn: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values())


@dataclass
class Batch:
    ids: np.ndarray  # (B, T)
    images: np.ndarray  # (B, H, W, 3)
    targets: np.ndarray  # (B, M): next-token ids at the answer-predicting positions


def make_batch(cfg: ModelConfig, samples: Sequence[QASample]) -> Batch:
    from .taskgen import VOCAB

    seqs = [build_sequence(cfg, s.question, s.answer) for s in samples]
    ids = np.stack([s.ids for s in seqs])
    targets = np.array([list(s.answer) + [VOCAB["EOS"]] for s in samples], dtype=np.int64)
    return Batch(ids, np.stack([s.image for s in samples]), targets)


def decode_ids(cfg: ModelConfig, samples: Sequence[QASample]) -> np.ndarray:
    return np.stack([build_sequence(cfg, s.question).ids for s in samples])


# ---------------------------------------------------------------- losses


def loss_ce_paths(model: TinyVLM, trace_int: Trace, trace_cor: Trace, targets) -> tuple[Tensor, Tensor]:
    omega = model.layout_omega()
    return (
        T.cross_entropy(trace_int.logits, omega, targets),
        T.cross_entropy(trace_cor.logits, omega, targets),
    )


def loss_kl(trace_int: Trace, trace_cor: Trace, omega, teacher_detach: bool = True) -> Tensor:
    """Mean over answer positions of KL(intact || corrupted) next-token distributions."""
    omega = np.asarray(omega, dtype=np.int64)
    if omega.size == 0:
        raise ContractError("empty answer position set")
    p = T.softmax(trace_int.logits[:, omega, :], axis=-1)
    q = T.softmax(trace_cor.logits[:, omega, :], axis=-1)
    return T.kl_divergence(p, q, detach_p=teacher_detach)


def _renorm(a: Tensor) -> Tensor:
    # every key gets the floor, so a row with no latent mass becomes uniform
    k = a.shape[-1]
    return (a + T.KL_FLOOR) / (a.sum(axis=-1, keepdims=True) + k * T.KL_FLOOR)


def attention_alignment(a_int: Tensor, a_cor: Tensor, variant: str, teacher_detach: bool = True) -> Tensor:
    """Alignment between two (..., M, keys) attention blocks for one layer."""
    if teacher_detach:
        a_int = a_int.detach()
    if variant == "answer_to_latents_mse":
        diff = a_int - a_cor
        return (diff * diff).mean()
    if variant == "answer_to_latents_kl":
        return T.kl_divergence(_renorm(a_int), _renorm(a_cor), detach_p=teacher_detach)
    if variant == "answer_to_all_kl":
        return T.kl_divergence(a_int, a_cor, detach_p=teacher_detach)
    raise ContractError(f"unknown attention variant {variant!r}")


def loss_attn(model: TinyVLM, trace_int: Trace, trace_cor: Trace, cfg: LossConfig) -> Tensor:
    layers = cfg.layers if cfg.layers is not None else tuple(range(model.cfg.n_layers))
    om = model.omega_slice
    terms = []
    for layer in layers:
        if cfg.attn_variant == "answer_to_all_kl":
            a_int = trace_int.attentions[layer][:, :, om, :]
            a_cor = trace_cor.attentions[layer][:, :, om, :]
        else:
            a_int = model.answer_to_latent_attention(trace_int, layer)
            a_cor = model.answer_to_latent_attention(trace_cor, layer)
        terms.append(attention_alignment(a_int, a_cor, cfg.attn_variant, cfg.teacher_detach))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


@dataclass
class StepResult:
    terms: dict[str, Tensor]
    total: Tensor
    trace_int: Trace
    trace_cor: Trace

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown(**{k: float(v.data) for k, v in self.terms.items()}, total=float(self.total.data))


def dual_path_losses(
    model: TinyVLM,
    batch: Batch,
    corrupted_images: np.ndarray,
    cfg: LossConfig,
    stub_terms: Sequence[str] = (),
) -> StepResult:
    """Build the full dual-path graph; ``stub_terms`` swaps named terms for constants."""
    trace_int = model.forward(batch.ids, batch.images)
    trace_cor = model.forward(batch.ids, corrupted_images, overrides=model.latent_states(trace_int))
    omega = model.layout_omega()
    ce_int, ce_cor = loss_ce_paths(model, trace_int, trace_cor, batch.targets)
    terms = {
        "ce_int": ce_int,
        "ce_cor": ce_cor,
        "kl": loss_kl(trace_int, trace_cor, omega, cfg.teacher_detach),
        "attn": loss_attn(model, trace_int, trace_cor, cfg),
    }
    for name in stub_terms:
        terms[name] = terms[name].detach()
    total = None
    for w, name in zip(cfg.weights, TERMS):
        part = terms[name] * w
        total = part if total is None else total + part
    return StepResult(terms, total, trace_int, trace_cor)


def corrupt_batch(images: np.ndarray, specs: Sequence[CorruptionSpec]) -> np.ndarray:
    return np.stack([corrupt(img, spec) for img, spec in zip(images, specs)])


def dual_path_step(
    model: TinyVLM,
    samples: Sequence[QASample],
    specs: Sequence[CorruptionSpec] | CorruptionSpec,
    cfg: LossConfig,
    stub_terms: Sequence[str] = (),
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """One forward/backward over a batch; returns the loss terms and parameter gradients."""
    if isinstance(specs, CorruptionSpec):
        specs = [specs] * len(samples)
    batch = make_batch(model.cfg, samples)
    res = dual_path_losses(model, batch, corrupt_batch(batch.images, specs), cfg, stub_terms)
    model.zero_grad()
    T.backward(res.total)
    grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in model.params.items()}
    return res.breakdown(), grads


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    momentum: float = 0.9
    warmup: int = 100
    seed: int = 0
    corruption: str = "blur"
    levels: tuple[float, ...] | None = None  # None = the mode's default ladder
    grad_clip: float | None = 1.0
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ContractError("steps must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError("optimizer must be 'sgd' or 'adam'")


def lr_at(step: int, tcfg: TrainConfig) -> float:
    if tcfg.warmup <= 0:
        return tcfg.lr
    return tcfg.lr * min(1.0, (step + 1) / tcfg.warmup)


class SGD:
    """Heavy-ball momentum: v <- mu v + g ; p <- p - lr v."""

    def __init__(self, params: list[Tensor], momentum: float):
        self.params = params
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float, clip: float | None = None) -> float:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        scale = clip / norm if clip is not None and norm > clip else 1.0
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += scale * g
            p.data -= lr * v
        return norm


class Adam:
    def __init__(self, params: list[Tensor], betas: tuple[float, float], eps: float = 1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float, clip: float | None = None) -> float:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        scale = clip / norm if clip is not None and norm > clip else 1.0
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            g = scale * g
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


def make_optimizer(model: TinyVLM, tcfg: TrainConfig):
    if tcfg.optimizer == "adam":
        return Adam(model.parameters(), tcfg.betas)
    return SGD(model.parameters(), tcfg.momentum)


def train(
    model: TinyVLM,
    dataset: Sequence[QASample],
    tcfg: TrainConfig,
    lcfg: LossConfig,
    log_path=None,
    progress=None,
) -> list[dict]:
    """Single-stage training. Returns one metrics row per step (also written as CSV)."""
    if len(dataset) == 0:
        raise ContractError("empty training set")
    master = np.random.default_rng(tcfg.seed)
    opt = make_optimizer(model, tcfg)
    rows: list[dict] = []
    writer = None
    fh = open(log_path, "w", newline="") if log_path is not None else None
    try:
        if fh is not None:
            writer = csv.writer(fh)
            writer.writerow(METRICS_HEADER)
        for step in range(tcfg.steps):
            batch_seed = int(master.integers(2**63))
            brng = np.random.default_rng(batch_seed)
            idx = brng.integers(len(dataset), size=tcfg.batch_size)
            specs = [sample_spec(tcfg.corruption, int(brng.integers(2**63)), tcfg.levels) for _ in idx]
            try:
                lb, _ = dual_path_step(model, [dataset[i] for i in idx], specs, lcfg)
            except FloatingPointError as exc:
                raise TrainingDiverged(step, batch_seed, {"error": str(exc)}) from exc
            if not lb.is_finite():
                raise TrainingDiverged(step, batch_seed, lb.as_dict())
            lr = lr_at(step, tcfg)
            opt.step(lr, tcfg.grad_clip)
            row = {"step": step, **lb.as_dict(), "lr": lr, "seed": batch_seed}
            rows.append(row)
            if writer is not None:
                writer.writerow([row[k] if k in ("step", "seed") else repr(row[k]) for k in METRICS_HEADER])
            if progress is not None:
                progress(row)
    finally:
        if fh is not None:
            fh.close()
    model.zero_grad()
    return rows


# ---------------------------------------------------------------- evaluation

EVAL_SPEC = CorruptionSpec("blur", 10.0, 0)


def _eval_spec(spec: CorruptionSpec, sample: QASample) -> CorruptionSpec:
    if spec.mode == "identity":
        return spec
    seed = (spec.seed * 1_000_003 + sample.seed) % 2**63
    return CorruptionSpec(spec.mode, spec.level, seed, spec.level_set)


def predict(
    model: TinyVLM,
    samples: Sequence[QASample],
    condition: str,
    spec: CorruptionSpec = EVAL_SPEC,
    chunk: int = 64,
) -> np.ndarray:
    if condition not in CONDITIONS:
        raise ContractError(f"condition must be one of {CONDITIONS}")
    preds = []
    for start in range(0, len(samples), chunk):
        part = samples[start : start + chunk]
        ids = decode_ids(model.cfg, part)
        clean = np.stack([s.image for s in part])
        if condition == "intact":
            preds.append(model.greedy_decode(ids, clean))
            continue
        if condition == "blind":
            preds.append(model.greedy_decode(ids, np.full_like(clean, 0.5)))
            continue
        cor = corrupt_batch(clean, [_eval_spec(spec, s) for s in part])
        if condition == "corrupted_no_latents":
            preds.append(model.greedy_decode(ids, cor))
            continue
        with T.no_grad():
            lat = model.latent_states(model.forward(ids, clean))
        preds.append(model.greedy_decode(ids, cor, overrides=lat))
    return np.concatenate(preds)


def evaluate(
    model: TinyVLM, dataset: Sequence[QASample], condition: str, spec: CorruptionSpec = EVAL_SPEC
) -> float:
    if len(dataset) == 0:
        raise ContractError("empty evaluation set")
    preds = predict(model, dataset, condition, spec)
    gold = np.array([s.answer[0] for s in dataset])
    return float(np.mean(preds == gold))


def evaluate_all(model, dataset, spec: CorruptionSpec = EVAL_SPEC) -> dict[str, float]:
    return {c: evaluate(model, dataset, c, spec) for c in CONDITIONS}


def chance_level(dataset: Sequence[QASample]) -> float:
    """Accuracy of the best constant answer (majority-class frequency)."""
    _, counts = np.unique([s.answer[0] for s in dataset], return_counts=True)
    return float(counts.max() / counts.sum())

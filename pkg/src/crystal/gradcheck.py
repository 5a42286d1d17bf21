"""Finite-difference verification of every differentiable op and the dual-path step.

Each registered check builds small random inputs, contracts the op output with
a fixed random weight tensor to get a scalar, and compares the backward pass
against central differences (step 1e-5). The error reported per op is

    max |analytic - numeric| / max(max |analytic|, max |numeric|, 1e-12)

over all checked coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    op: str
    max_rel_err: float
    worst: tuple | None  # (input name, flat index) of the worst coordinate
    passed: bool


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, int]:
    diff = np.abs(analytic - numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    i = int(np.argmax(diff)) if diff.size else 0
    return float(diff.max(initial=0.0) / scale), i


def numeric_grad(f: Callable[[], float], arr: np.ndarray, coords, h: float = STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr.flat[c]`` for each c; ``arr`` is perturbed in place."""
    out = np.empty(len(coords))
    flat = arr.reshape(-1)
    for j, c in enumerate(coords):
        old = flat[c]
        flat[c] = old + h
        fp = f()
        flat[c] = old - h
        fm = f()
        flat[c] = old
        out[j] = (fp - fm) / (2 * h)
    return out


def check_function(name: str, fn: Callable, inputs: dict[str, np.ndarray], seed: int = 0) -> CheckResult:
    """Gradient-check ``fn(**tensors)`` against central differences on every input coordinate."""
    rng = np.random.default_rng(seed)
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in inputs.items()}
    out = fn(**tensors)
    weight = rng.normal(size=out.shape)
    loss = (out * weight).sum()
    T.backward(loss)

    def value() -> float:
        with T.no_grad():
            return float(((fn(**tensors)).data * weight).sum())

    worst_err, worst = 0.0, None
    for k, t in tensors.items():
        coords = np.arange(t.size)
        num = numeric_grad(value, t.data, coords)
        ana = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        err, i = rel_error(ana, num)
        if err >= worst_err:
            worst_err, worst = err, (k, int(coords[i]))
    return CheckResult(name, worst_err, worst, worst_err < TOLERANCE)


# ---------------------------------------------------------------- op registry


def _distribution(rng, shape):
    x = rng.uniform(0.1, 1.0, size=shape)
    return x / x.sum(axis=-1, keepdims=True)


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, dict[str, np.ndarray]]]:
    n = rng.normal
    labels_pos = np.array([0, 2])
    labels_ids = np.array([[1, 4], [3, 0]])
    p_fixed = _distribution(rng, (3, 5))
    return {
        "add": (lambda a, b: a + b, {"a": n(size=(3, 4)), "b": n(size=(4,))}),
        "sub": (lambda a, b: a - b, {"a": n(size=(3, 4)), "b": n(size=(3, 1))}),
        "mul": (lambda a, b: a * b, {"a": n(size=(3, 4)), "b": n(size=(3, 4))}),
        "div": (lambda a, b: a / b, {"a": n(size=(3, 4)), "b": rng.uniform(0.5, 2.0, size=(3, 4))}),
        "exp": (T.exp, {"x": n(size=(3, 4))}),
        "log": (T.log, {"x": rng.uniform(0.5, 2.0, size=(3, 4))}),
        "tanh": (T.tanh, {"x": n(size=(3, 4))}),
        "gelu": (T.gelu, {"x": n(size=(3, 4))}),
        "maximum": (lambda x: T.maximum(x, 0.05), {"x": rng.uniform(0.1, 1.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))}),
        "sum": (lambda x: x.sum(axis=1, keepdims=True), {"x": n(size=(3, 4))}),
        "mean": (lambda x: x.mean(axis=0), {"x": n(size=(3, 4))}),
        "reshape": (lambda x: x.reshape(4, 3), {"x": n(size=(3, 4))}),
        "transpose": (lambda x: x.transpose(2, 0, 1), {"x": n(size=(2, 3, 4))}),
        "getitem": (lambda x: x[:, 1:3], {"x": n(size=(3, 4))}),
        "concat": (lambda a, b: T.concat([a, b], axis=1), {"a": n(size=(2, 3)), "b": n(size=(2, 2))}),
        "embedding": (lambda w: T.embedding(w, np.array([[0, 2, 2], [1, 0, 3]])), {"w": n(size=(4, 3))}),
        "replace_rows": (lambda x, v: T.replace_rows(x, np.array([1, 2]), v), {"x": n(size=(2, 4, 3)), "v": n(size=(2, 2, 3))}),
        "matmul": (T.matmul, {"a": n(size=(3, 4)), "b": n(size=(4, 5))}),
        "matmul_batched": (T.matmul, {"a": n(size=(2, 3, 4)), "b": n(size=(2, 4, 5))}),
        "softmax": (lambda x: T.softmax(x, axis=-1), {"x": n(size=(3, 5))}),
        "log_softmax": (lambda x: T.log_softmax(x, axis=-1), {"x": n(size=(3, 5))}),
        "layernorm": (lambda x, g, b: T.layernorm(x, g, b), {"x": n(size=(3, 5)), "g": n(size=(5,)), "b": n(size=(5,))}),
        "cross_entropy": (lambda x: T.cross_entropy(x, labels_pos, labels_ids), {"x": n(size=(2, 3, 5))}),
        "kl_divergence": (lambda p, q: T.kl_divergence(T.softmax(p), T.softmax(q), detach_p=False), {"p": n(size=(3, 5)), "q": n(size=(3, 5))}),
        "kl_divergence_detached": (lambda q: T.kl_divergence(p_fixed, T.softmax(q)), {"q": n(size=(3, 5))}),
    }


# ---------------------------------------------------------------- composite step


def micro_setup(seed: int = 0):
    """Micro model (l=2, d=16, K=2) on 16x16 random images with real questions."""
    from .model import ModelConfig, TinyVLM
    from .taskgen import QASample, make_sample

    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=16, image_size=16, n_latents=2, seed=seed, init_std=0.3)
    model = TinyVLM(cfg)
    rng = np.random.default_rng(seed)
    samples = []
    for i, kind in enumerate(("count", "relation")):
        s = make_sample(seed * 10 + i, kind)
        samples.append(QASample(rng.uniform(size=(16, 16, 3)), s.question, s.answer, kind, s.seed))
    return model, samples


def check_dual_path(variant: str, seed: int = 0, coords_per_param: int = 6) -> CheckResult:
    from .corruption import CorruptionSpec
    from .trainer import LossConfig, corrupt_batch, dual_path_losses, make_batch

    model, samples = micro_setup(seed)
    lcfg = LossConfig(attn_variant=variant, teacher_detach=False)
    batch = make_batch(model.cfg, samples)
    cor = corrupt_batch(batch.images, [CorruptionSpec("blur", 2.0)] * len(samples))

    res = dual_path_losses(model, batch, cor, lcfg)
    model.zero_grad()
    T.backward(res.total)

    def value() -> float:
        with T.no_grad():
            return float(dual_path_losses(model, batch, cor, lcfg).total.data)

    # all parameters form one input: some true gradients are exactly zero (key
    # biases shift every score in a softmax row) and would otherwise be judged
    # against their own round-off
    rng = np.random.default_rng(seed + 1)
    names, ana, num = [], [], []
    for name, p in model.params.items():
        k = min(coords_per_param, p.size)
        coords = np.sort(rng.choice(p.size, size=k, replace=False))
        num.append(numeric_grad(value, p.data, coords))
        ana.append(p.grad.reshape(-1)[coords])
        names += [(name, int(c)) for c in coords]
    worst_err, i = rel_error(np.concatenate(ana), np.concatenate(num))
    worst = names[i]
    return CheckResult(f"dual_path_step[{variant}]", worst_err, worst, worst_err < TOLERANCE)


def registry() -> list[str]:
    from .trainer import ATTN_VARIANTS

    return list(_op_cases(np.random.default_rng(0))) + [f"dual_path_step[{v}]" for v in ATTN_VARIANTS]


def run_all(seed: int = 0) -> list[CheckResult]:
    from .trainer import ATTN_VARIANTS

    rng = np.random.default_rng(seed)
    results = [check_function(name, fn, inputs, seed) for name, (fn, inputs) in _op_cases(rng).items()]
    results += [check_dual_path(v, seed) for v in ATTN_VARIANTS]
    return results

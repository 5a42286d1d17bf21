"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every operation returns a new :class:`Tensor`. When gradient recording is on
and at least one input requires a gradient, the result remembers its parents
and a closure mapping the upstream gradient to one gradient per parent.
:func:`backward` walks that graph in reverse topological order.

The graph lives exactly as long as the tensors referencing it, so a loss going
out of scope releases the whole forward pass.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

DTYPE = np.float64
KL_FLOOR = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _prev=(), _backward=None, op: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        if 0 in arr.shape:
            raise DimensionError(f"zero extent in shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev: tuple[Tensor, ...] = _prev
        self._backward: Callable | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg}, op={self.op!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _prev=tuple(parents), _backward=fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._prev):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays; clear them between
    steps with :meth:`Tensor.zero_grad`.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not attached to any requires_grad tensor")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._prev, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), fn, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), fn, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _result(out, (x,), fn, "gelu")


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise max against a constant; gradient passes where x > floor."""
    xd = x.data
    keep = xd > floor
    return _result(np.where(keep, xd, floor), (x,), lambda g: (g * keep,), "maximum")


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def _is_advanced(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    advanced = _is_advanced(idx)

    def fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _result(np.array(x.data[idx]), (x,), fn, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn, "concat")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _result(table.data[ids], (table,), fn, "embedding")


def replace_rows(x: Tensor, positions: np.ndarray, values: Tensor) -> Tensor:
    """Copy of ``x`` with rows ``positions`` along axis -2 taken from ``values``.

    Gradient at the replaced rows goes to ``values``; ``x`` gets zero there.
    """
    positions = np.asarray(positions, dtype=np.int64)
    expected = x.shape[:-2] + (len(positions), x.shape[-1])
    if values.shape != expected:
        raise DimensionError(f"replacement block has shape {values.shape}, expected {expected}")
    out = x.data.copy()
    out[..., positions, :] = values.data

    def fn(g):
        gx = g.copy()
        gx[..., positions, :] = 0.0
        return gx, g[..., positions, :]

    return _result(out, (x, values), fn, "replace_rows")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; ``b`` may be a plain 2-D weight."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {ad.shape} @ {bd.shape}")
    if bd.ndim == 2 and ad.ndim > 2:
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(lead + (bd.shape[1],))

        def fn(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _result(out, (a, b), fn, "matmul")

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), fn, "matmul")


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if not np.all(np.isfinite(np.max(xd, axis=axis))):
        raise FloatingPointError("softmax row with no finite entry")
    z = xd - np.max(xd, axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def fn(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _result(p, (x,), fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - np.max(xd, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def fn(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _result(out, (x,), fn, "log_softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply gain and bias."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"gain/bias must have shape ({n},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def fn(g):
        dxhat = g * gd
        dx = inv / n * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + bias.data, (x, gain, bias), fn, "layernorm")


# ---------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, positions, targets) -> Tensor:
    """Mean of ``-log softmax(logits)[..., pos, target]`` over labelled positions.

    ``logits`` has shape ``(..., T, V)``; ``positions`` is a 1-D array of row
    indices shared across the leading axes; ``targets`` has shape
    ``logits.shape[:-2] + (len(positions),)``. Rows not listed get zero gradient.
    """
    positions = np.asarray(positions, dtype=np.int64).reshape(-1)
    targets = np.asarray(targets, dtype=np.int64)
    if positions.size == 0:
        raise ContractError("cross_entropy needs at least one labelled position")
    T, V = logits.shape[-2:]
    if targets.shape != logits.shape[:-2] + (positions.size,):
        raise DimensionError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if positions.min() < 0 or positions.max() >= T or len(set(positions.tolist())) != positions.size:
        raise ContractError("label positions must be distinct and inside the sequence")
    if targets.min() < 0 or targets.max() >= V:
        raise ContractError("label id outside the vocabulary")
    sel = logits.data[..., positions, :]
    z = sel - sel.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    count = picked.size
    shape = logits.shape

    def fn(g):
        d = np.exp(logp)
        np.put_along_axis(
            d, targets[..., None], np.take_along_axis(d, targets[..., None], axis=-1) - 1.0, axis=-1
        )
        full = np.zeros(shape, dtype=DTYPE)
        full[..., positions, :] = d * (g / count)
        return (full,)

    return _result(np.array(-picked.mean()), (logits,), fn, "cross_entropy")


def _check_distribution(x: np.ndarray, name: str) -> None:
    if np.any(x < 0) or not np.all(np.abs(x.sum(axis=-1) - 1.0) <= 1e-6):
        raise ContractError(f"{name} rows must be nonnegative and sum to 1")


def kl_divergence(p: Tensor, q: Tensor, detach_p: bool = True) -> Tensor:
    """``sum p * ln(p / q)`` along the last axis, averaged over the remaining rows.

    ``q`` is floored at 1e-12 inside the log and ``0 * ln 0`` counts as 0. With
    ``detach_p`` the first argument is a constant target.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence shapes differ: {p.shape} vs {q.shape}")
    pd, qd = p.data, q.data
    _check_distribution(pd, "p")
    _check_distribution(qd, "q")
    rows = pd.size // pd.shape[-1]
    qf = np.maximum(qd, KL_FLOOR)
    pos = pd > 0
    logp = np.log(np.where(pos, pd, 1.0))
    terms = np.where(pos, pd * (logp - np.log(qf)), 0.0)
    value = terms.sum() / rows

    def fn(g):
        gq = -g / rows * pd / qf * (qd > KL_FLOOR)
        gp = None
        if not detach_p:
            gp = g / rows * (np.log(np.maximum(pd, KL_FLOOR)) - np.log(qf) + 1.0)
        return gp, gq

    parents = (p, q)
    if detach_p:
        parents = (p.detach(), q)
    return _result(np.array(value), parents, fn, "kl_divergence")


def parameters_grads(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]

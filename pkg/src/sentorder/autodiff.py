"""Reverse-mode automatic differentiation over dense numpy arrays.

Sized for a small transformer encoder: the op set covers matrix products,
broadcast arithmetic, the usual activation and normalization functions, a
row softmax, embedding-style gathers, and cross entropy against soft target
distributions.

Ops record onto the innermost active ``Tape``; with no tape active they
compute forward values only, which is how evaluation passes run without
retaining a graph. ``Tape.backward`` walks the recorded nodes once in
reverse execution order (execution order is already topological) and
accumulates gradients on every tensor that participated.

All gradient math is exact and is cross-checked against central finite
differences by the test suite; ``grad_check`` is the instrument used for
that. Gradient checking should always run in 64-bit.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import FatalError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

# Additive bias that removes a position from a softmax row: after max
# subtraction the exponential underflows to exactly 0.
MASKED_OUT = -1e9


class Tensor:
    """A dense float array plus the gradient accumulated by a backward pass."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=np.float64):
        self.data = np.array(data, dtype=dtype)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _wrap(data: np.ndarray) -> Tensor:
    t = object.__new__(Tensor)
    t.data = data
    t.grad = None
    return t


_TAPES: list["Tape"] = []


class Tape:
    """Execution-ordered record of ops, used as a context manager.

    Entering a tape makes every op append a node ``(out, parents,
    pull_fn)``; ``backward`` replays the list once in reverse, calling each
    node's pull function with the output gradient and adding the returned
    pieces onto the parents.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, root: Tensor) -> None:
        if root.data.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.data.shape}")
        root.grad = np.ones_like(root.data)
        for out, parents, pull in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            for parent, piece in zip(parents, pull(g)):
                if piece is None:
                    continue
                if parent.grad is None:
                    parent.grad = piece
                else:
                    parent.grad = parent.grad + piece


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _record(out: Tensor, parents: tuple[Tensor, ...], pull: Callable) -> None:
    tape = _active_tape()
    if tape is not None:
        tape._nodes.append((out, parents, pull))


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _operand(x) -> tuple[np.ndarray, Tensor | None]:
    if isinstance(x, Tensor):
        return x.data, x
    return np.asarray(x, dtype=np.float64), None


def add(a, b) -> Tensor:
    ad, at = _operand(a)
    bd, bt = _operand(b)
    out = _wrap(ad + bd)
    parents = tuple(t for t in (at, bt) if t is not None)
    if parents:

        def pull(g):
            pieces = []
            if at is not None:
                pieces.append(_unbroadcast(g, ad.shape))
            if bt is not None:
                pieces.append(_unbroadcast(g, bd.shape))
            return pieces

        _record(out, parents, pull)
    return out


def mul(a, b) -> Tensor:
    ad, at = _operand(a)
    bd, bt = _operand(b)
    out = _wrap(ad * bd)
    parents = tuple(t for t in (at, bt) if t is not None)
    if parents:

        def pull(g):
            pieces = []
            if at is not None:
                pieces.append(_unbroadcast(g * bd, ad.shape))
            if bt is not None:
                pieces.append(_unbroadcast(g * ad, bd.shape))
            return pieces

        _record(out, parents, pull)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _wrap(a.data @ b.data)

    def pull(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    _record(out, (a, b), pull)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = _wrap(y)
    _record(out, (x,), lambda g: (g * (1.0 - y * y),))
    return out


def gelu(x: Tensor, exact: bool = False) -> Tensor:
    """Gaussian error linear unit; tanh approximation by default."""
    xd = x.data
    if exact:
        cdf = 0.5 * (1.0 + _erf(xd / math.sqrt(2.0)))
        out = _wrap(xd * cdf)

        def pull(g):
            pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
            return (g * (cdf + xd * pdf),)

    else:
        inner = _GELU_C * (xd + _GELU_A * xd ** 3)
        t = np.tanh(inner)
        out = _wrap(0.5 * xd * (1.0 + t))

        def pull(g):
            d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
            return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner),)

    _record(out, (x,), pull)
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _wrap(y)

    def pull(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    _record(out, (x,), pull)
    return out


def layer_norm(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv
    out = _wrap(y)

    def pull(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    _record(out, (x,), pull)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout; the identity when ``train`` is false or rate is 0."""
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = _wrap(x.data * keep)
    _record(out, (x,), lambda g: (g * keep,))
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; gradients scatter-add back into it."""
    ids = np.asarray(ids)
    out = _wrap(table.data[ids])

    def pull(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    _record(out, (table,), pull)
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = _wrap(x.data.reshape(shape))
    _record(out, (x,), lambda g: (g.reshape(x.data.shape),))
    return out


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = _wrap(np.transpose(x.data, axes))
    inverse = tuple(np.argsort(axes))
    _record(out, (x,), lambda g: (np.transpose(g, inverse),))
    return out


def sum_(x: Tensor) -> Tensor:
    out = _wrap(np.asarray(x.data.sum()))
    _record(out, (x,), lambda g: (np.broadcast_to(g, x.data.shape),))
    return out


def mean(x: Tensor) -> Tensor:
    size = x.data.size
    out = _wrap(np.asarray(x.data.mean()))
    _record(out, (x,), lambda g: (np.broadcast_to(g / size, x.data.shape),))
    return out


def cross_entropy_with_soft_targets(logits: Tensor, targets) -> Tensor:
    """Mean cross entropy between logit rows and target distributions.

    Accepts a single row or a stack of rows. Computed via log-sum-exp, so
    large logits are safe. No gradient flows to the targets.
    """
    td, _ = _operand(targets)
    ld = logits.data
    if ld.shape != td.shape:
        raise ValueError(f"cross entropy shape mismatch: {ld.shape} vs {td.shape}")
    l2 = ld.reshape(-1, ld.shape[-1])
    t2 = td.reshape(-1, td.shape[-1])
    m = l2.max(axis=-1, keepdims=True)
    z = l2 - m
    lse = m[:, 0] + np.log(np.exp(z).sum(axis=-1))
    rows = lse - (t2 * l2).sum(axis=-1)
    out = _wrap(np.asarray(rows.mean()))

    def pull(g):
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        return (((p - t2) * (g / l2.shape[0])).reshape(ld.shape),)

    _record(out, (logits,), pull)
    return out


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the taped gradient of ``f`` and central differences.

    ``f`` must map the tensor to a scalar and be deterministic across calls.
    The relative error at a coordinate is |a - n| / max(1e-8, |a| + |n|).
    """
    x = Tensor(point.data.copy(), dtype=np.float64)
    with Tape() as tape:
        y = f(x)
        tape.backward(y)
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).copy()
    if not np.all(np.isfinite(analytic)):
        bad = int(np.flatnonzero(~np.isfinite(analytic.reshape(-1)))[0])
        raise FatalError(f"non-finite analytic gradient at coordinate {bad}")

    flat = x.data.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x).item()
        flat[i] = orig - eps
        lo = f(x).item()
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise FatalError(f"non-finite finite-difference value at coordinate {i}")
        numeric[i] = (hi - lo) / (2.0 * eps)

    a = analytic.reshape(-1)
    rel = np.abs(a - numeric) / np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    return float(rel.max())

"""Minimal reverse-mode autodiff over float64 numpy arrays.

Everything trainable in this package is a :class:`Param`; forward passes
compose the primitive functions below, which record onto the active
:class:`Tape` (define-by-run, one tape per training step). ``backward``
replays the tape once in reverse and accumulates gradients into the
reachable params; unreachable params keep their zero gradient buffers.

The primitive set is deliberately small: matmul, elementwise arithmetic,
sigmoid/tanh/relu/softplus, exp/log/sqrt, softmax/log-softmax, concat,
slicing/gather, sum/mean reductions, layer-norm and per-dimension batch
standardization. Broadcasting follows numpy for elementwise ops (the
backward pass sums gradients over broadcast axes); matmul requires equal
stacked leading dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class NumericsError(RuntimeError):
    """Non-finite values, invalid losses, or other numerical failures."""


class ShapeError(ValueError):
    """Shape mismatch in a primitive, naming the operation and shapes."""

    def __init__(self, op: str, message: str, *shapes: tuple) -> None:
        detail = f"{op}: {message}"
        if shapes:
            detail += " (shapes: " + ", ".join(str(s) for s in shapes) + ")"
        super().__init__(detail)


# Incremented when the batch-standardization std floor kicks in; training
# loops snapshot and reset this per epoch so the condition reaches run reports.
FLAGS = {"std_floor_hits": 0}


def reset_flags() -> None:
    for key in FLAGS:
        FLAGS[key] = 0


class Tensor:
    """A float64 array plus the context needed to backpropagate through it."""

    __slots__ = ("values", "grad", "needs_grad", "parents", "backward_fn")

    def __init__(self, values) -> None:
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.needs_grad = False
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise NumericsError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, needs_grad={self.needs_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Param(Tensor):
    """Named trainable leaf with a persistent same-shape gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, name: str, values) -> None:
        super().__init__(values)
        self.name = name
        self.needs_grad = True
        self.grad = np.zeros_like(self.values)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


def constant(values) -> Tensor:
    """Wrap an array as a non-trainable leaf."""
    return Tensor(values)


class Tape:
    """Ordered record of primitive applications; topological by construction."""

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []


_TAPE_STACK: list[Tape] = []


class tape:
    """Context manager activating a fresh tape for one forward/backward pass."""

    def __enter__(self) -> Tape:
        self._tape = Tape()
        _TAPE_STACK.append(self._tape)
        return self._tape

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(values)
    tp = _active_tape()
    if tp is not None and any(p.needs_grad for p in parents):
        out.needs_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        tp.nodes.append(out)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable param's ``grad``.

    Requires a scalar loss built under the currently active tape; each tape
    supports one backward pass.
    """
    tp = _active_tape()
    if tp is None:
        raise NumericsError("backward called with no active tape")
    if loss.size != 1:
        raise NumericsError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.needs_grad:
        return  # loss does not depend on any trainable parameter
    loss.grad = np.ones_like(loss.values)
    for node in reversed(tp.nodes):
        gout = node.grad
        if gout is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(gout)):
            if g is None or not parent.needs_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
        node.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting; backward sums over broadcast axes)
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(
        a.values * b.values,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.values, a.shape),
            _unbroadcast(g * a.values, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(
        a.values / b.values,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.values, a.shape),
            _unbroadcast(-g * a.values / (b.values * b.values), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.values, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra and indexing
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; stacked operands must share identical leading dims."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError("matmul", "operands must have equal rank >= 2", a.shape, b.shape)
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", "incompatible operand shapes", a.shape, b.shape)

    def bwd(g):
        return (
            g @ np.swapaxes(b.values, -1, -2),
            np.swapaxes(a.values, -1, -2) @ g,
        )

    return _make(a.values @ b.values, (a, b), bwd)


def gather(x, indices) -> Tensor:
    """Select rows along axis 0; duplicate indices accumulate in the backward."""
    x = _lift(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather", "indices must be 1-D", idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError("gather", f"index out of range for {x.shape[0]} rows")

    def bwd(g):
        buf = np.zeros_like(x.values)
        np.add.at(buf, idx, g)
        return (buf,)

    return _make(x.values[idx], (x,), bwd)


def take(x, key) -> Tensor:
    """Indexing, e.g. ``x[:, t, :]``, ``x[:, a:b]``, or index-array tuples.

    The backward accumulates with np.add.at, so repeated indices are safe.
    """
    x = _lift(x)

    def bwd(g):
        buf = np.zeros_like(x.values)
        np.add.at(buf, key, g)
        return (buf,)

    return _make(x.values[key], (x,), bwd)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        slicer = [slice(None)] * g.ndim
        out = []
        for i in range(len(parts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            out.append(g[tuple(slicer)])
        return tuple(out)

    return _make(np.concatenate([p.values for p in parts], axis=axis), tuple(parts), bwd)


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    return _make(x.values.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x, axis1: int, axis2: int) -> Tensor:
    x = _lift(x)
    return _make(
        np.swapaxes(x.values, axis1, axis2),
        (x,),
        lambda g: (np.swapaxes(g, axis1, axis2),),
    )


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = _lift(x)
    y = _sigmoid(x.values)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = _lift(x)
    y = np.tanh(x.values)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x) -> Tensor:
    x = _lift(x)
    mask = x.values > 0
    return _make(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def softplus(x) -> Tensor:
    x = _lift(x)
    return _make(
        np.logaddexp(0.0, x.values),
        (x,),
        lambda g: (g * _sigmoid(x.values),),
    )


def exp(x) -> Tensor:
    x = _lift(x)
    y = np.exp(x.values)
    return _make(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = _lift(x)
    return _make(np.log(x.values), (x,), lambda g: (g / x.values,))


def sqrt(x) -> Tensor:
    x = _lift(x)
    y = np.sqrt(x.values)
    return _make(y, (x,), lambda g: (g / (2.0 * y),))


def softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bwd)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions and normalizers
# ---------------------------------------------------------------------------


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - numpy-style name
    x = _lift(x)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(x.values.sum(axis=axis, keepdims=keepdims), (x,), bwd)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    count = x.size if axis is None else x.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(x.values.mean(axis=axis, keepdims=keepdims), (x,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    mu = x.values.mean(axis=-1, keepdims=True)
    var = x.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv

    def bwd(g):
        gx = g * gain.values
        dx = inv * (
            gx
            - gx.mean(axis=-1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        return (dx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return _make(xhat * gain.values + bias.values, (x, gain, bias), bwd)


def standardize(x, axis: int = 0, floor: float = 1e-6) -> Tensor:
    """Subtract the mean and divide by the std along ``axis`` (population std).

    Dimensions whose std falls below ``floor`` are divided by ``floor``
    instead, and the event is counted in ``FLAGS['std_floor_hits']``.
    """
    x = _lift(x)
    mu = x.values.mean(axis=axis, keepdims=True)
    centered = x.values - mu
    std = np.sqrt((centered * centered).mean(axis=axis, keepdims=True))
    floored = std < floor
    if floored.any():
        FLAGS["std_floor_hits"] += int(floored.sum())
    denom = np.where(floored, floor, std)
    z = centered / denom
    count = x.shape[axis]

    def bwd(g):
        gc = (g - g.mean(axis=axis, keepdims=True)) / denom
        # std contributes to the gradient only where it was not floored
        corr = z * (g * z).mean(axis=axis, keepdims=True) / denom
        return (gc - np.where(floored, 0.0, corr),)

    return _make(z, (x,), bwd)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """AdamW with decoupled weight decay and global-norm gradient clipping."""

    lr: float
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_global_norm(params: Iterable[Param], max_norm: float) -> float:
    params = list(params)
    total = math.sqrt(math.fsum(float((p.grad * p.grad).sum()) for p in params))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * scale
    return total


def adamw_step(state: OptimizerState, params: Iterable[Param]) -> None:
    """One AdamW update; decay applies to values, gradients are zeroed after."""
    params = list(params)
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NumericsError(f"non-finite gradient for parameter {p.name!r}")
    if state.clip_norm is not None:
        clip_global_norm(params, state.clip_norm)
    state.step_count += 1
    bc1 = 1.0 - state.beta1**state.step_count
    bc2 = 1.0 - state.beta2**state.step_count
    for p in params:
        g = p.grad
        m = state.m.setdefault(p.name, np.zeros_like(p.values))
        v = state.v.setdefault(p.name, np.zeros_like(p.values))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.values -= state.lr * (step + state.weight_decay * p.values)
        if not np.isfinite(p.values).all():
            raise NumericsError(f"non-finite values in parameter {p.name!r} after update")
        p.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference gradient oracle
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-parameter max relative error of reverse-mode vs central differences."""

    per_param: dict[str, float]
    tol: float

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.per_param.items() if v >= self.tol}


def grad_check(
    build_loss: Callable[[], Tensor],
    params: Sequence[Param],
    step: float = 1e-5,
    tol: float = 1e-4,
    rel_floor: float = 1e-3,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    ``build_loss`` must be deterministic (fix any rng it uses) and is invoked
    repeatedly with perturbed parameter values. The relative error denominator
    is floored at ``rel_floor`` so finite-difference roundoff on near-zero
    gradient entries does not register as disagreement.
    """
    for p in params:
        p.zero_grad()
    with tape():
        loss = build_loss()
        backward(loss)
    analytic = {p.name: np.array(p.grad) for p in params}
    for p in params:
        p.zero_grad()

    per_param: dict[str, float] = {}
    for p in params:
        flat = p.values.reshape(-1)
        fd = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = build_loss().item()
            flat[i] = orig - step
            down = build_loss().item()
            flat[i] = orig
            fd[i] = (up - down) / (2.0 * step)
        a = analytic[p.name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), rel_floor)
        per_param[p.name] = float(np.max(np.abs(a - fd) / denom)) if flat.size else 0.0
    return GradCheckReport(per_param=per_param, tol=tol)

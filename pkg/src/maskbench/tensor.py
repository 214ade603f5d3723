"""Dense float64 tensors with tape-based reverse-mode autodiff.

Only the operations the encoder, masks and contrastive loss need are
provided. Every op records a closure on the active :class:`Tape`; calling
:func:`backward` walks the tape in reverse once and then marks it consumed.

Intermediate gradients are dropped after the backward pass unless the
tensor opted in with :meth:`Tensor.retain_grad`.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

#: Additive bias marking a blocked attention entry.
BLOCKED = -np.inf


class TensorError(ValueError):
    """Shape or dimension mismatch between operands."""


class TapeError(RuntimeError):
    """Misuse of the tape, e.g. a second backward on a consumed tape."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class DegenerateError(ArithmeticError):
    """Degenerate input such as a zero vector or a fully blocked softmax row."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape", "_retain", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None
        self._retain = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def retain_grad(self) -> "Tensor":
        """Keep this tensor's gradient after backward even if it is not a leaf."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager to make it the active tape; ops executed outside
    any ``with`` block go to a module-level default tape that is replaced
    automatically once consumed.
    """

    def __init__(self):
        self.nodes: list[tuple[Callable, tuple[Tensor, ...], Tensor]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _STACK.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape; create a new Tape")
        for t in inputs:
            if t._tape is not None and t._tape is not self and not t._tape.consumed:
                raise TapeError("operands belong to a different tape")
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append((fn, inputs, out))

    def reset(self) -> None:
        for _, _, out in self.nodes:
            out._tape = None
            out.node_id = None
        self.nodes = []
        self.consumed = False


_STACK: list[Tape] = []
_DEFAULT: list[Tape] = [Tape()]
_GRAD_ENABLED = [True]


class no_grad:
    """Context manager: ops inside record nothing (inference / frozen probing)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev


def current_tape() -> Tape:
    if _STACK:
        return _STACK[-1]
    if _DEFAULT[0].consumed:
        _DEFAULT[0] = Tape()
    return _DEFAULT[0]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    needs = _GRAD_ENABLED[0] and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        current_tape().record(out, tuple(inputs), fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf that requires it, plus retained tensors."""
    if loss.data.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            return
        raise TapeError("loss is not on any tape (no input requires grad)")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if loss.node_id is None:
        raise TapeError("loss is not on the current tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    keep: dict[int, Tensor] = {id(loss): loss}
    for fn, inputs, out in reversed(tape.nodes[: loss.node_id + 1]):
        g = grads.pop(id(out), None)
        if out._retain and g is not None:
            out.grad = g
        if g is None:
            continue
        in_grads = fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                keep[key] = t
    # only leaves remain: every recorded intermediate was popped above
    for key, g in grads.items():
        t = keep[key]
        t.grad = g if t.grad is None else t.grad + g
    tape.consumed = True
    # outputs keep pointing at the consumed tape so a repeated backward is caught
    for _, _, out in tape.nodes:
        out.node_id = None
    tape.nodes = []


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = -np.logaddexp(0.0, -x)
    return _make(out, (a,), lambda g: (g * _sigmoid(-x),))


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    z = np.exp(-np.abs(x))
    return np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    half = 0.5 * (1.0 + t)
    out = x * half

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (half + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), fn)


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),))


# ------------------------------------------------------------------ reductions


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis), (a,), fn)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis), 1.0 / n)


# ------------------------------------------------------------- shape movement


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; backward scatters with accumulation."""
    shape = a.shape
    basic = all(isinstance(i, (int, np.integer, slice)) for i in (index if isinstance(index, tuple) else (index,)))

    def fn(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g  # basic indexing never repeats an element
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab, dim = table.shape

    flat = ids.reshape(-1)
    order = np.argsort(flat, kind="stable")
    uniq, starts = np.unique(flat[order], return_index=True)

    def fn(g):
        out = np.zeros((vocab, dim))
        if flat.size:
            out[uniq] = np.add.reduceat(g.reshape(-1, dim)[order], starts, axis=0)
        return (out,)

    return _make(table.data[ids], (table,), fn)


# -------------------------------------------------------------------- algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must agree.

    ``b`` may also be a plain 2-D matrix shared across ``a``'s leading axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise TensorError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape (d_in, d_out)."""
    if x.shape[-1] != weight.shape[0]:
        raise TensorError(f"linear dimension mismatch: {x.shape} @ {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out = out + bias.data
        inputs = (x, weight, bias)

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, inputs, fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise TensorError(f"layer_norm shapes: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    d = xd.shape[-1]

    def fn(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        return gx, (flat * xhat.reshape(-1, d)).sum(axis=0), flat.sum(axis=0)

    return _make(xhat * gd + bias.data, (x, gain, bias), fn)


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Row-wise softmax of ``logits + mask`` over the last axis.

    ``mask`` is an additive bias broadcastable to ``logits``: finite entries
    (<= 0) are added, :data:`BLOCKED` entries are excluded and come out as
    exact zeros. It may be a plain array, an ``AttentionMask`` (anything with
    a ``bias`` array) or a :class:`Tensor`, in which case it is
    differentiable at the visible entries.
    """
    inputs: tuple[Tensor, ...] = (logits,)
    if isinstance(mask, Tensor):
        bias = mask.data
        inputs = (logits, mask)
    else:
        bias = np.asarray(getattr(mask, "bias", mask), dtype=np.float64)
    try:
        full = np.broadcast_shapes(bias.shape, logits.shape)
    except ValueError:
        raise TensorError(f"mask shape {bias.shape} does not match logits {logits.shape}") from None
    if full != logits.shape:
        raise TensorError(f"mask shape {bias.shape} does not match logits {logits.shape}")
    visible = bias != BLOCKED
    if visible.all():
        z = logits.data + bias
        e = np.exp(z - z.max(axis=-1, keepdims=True))
    else:
        if not np.all(visible.any(axis=-1)):
            raise DegenerateError("attention row with every entry blocked")
        z = logits.data + np.where(visible, bias, 0.0)
        zmax = np.max(np.where(visible, z, -np.inf), axis=-1, keepdims=True)
        e = np.where(visible, np.exp(np.where(visible, z - zmax, 0.0)), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        gz = p * (g - (g * p).sum(axis=-1, keepdims=True))
        if len(inputs) == 1:
            return (gz,)
        return gz, _unbroadcast(np.where(visible, gz, 0.0), bias.shape)

    return _make(p, inputs, fn)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Divide by the L2 norm along ``axis``; zero vectors are rejected."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateError("cannot normalise a zero vector")
    y = xd / norm

    def fn(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (x,), fn)


def masked_logsumexp(x: Tensor, keep: np.ndarray, axis: int = -1) -> Tensor:
    """log(sum(exp(x)) over entries where ``keep`` is True), max-shifted.

    ``keep`` is a constant gate: dropped entries receive exactly zero gradient.
    """
    keep = np.asarray(keep, dtype=bool)
    if not np.all(keep.any(axis=axis)):
        raise DegenerateError("log-sum-exp over an empty set")
    xd = x.data
    m = np.max(np.where(keep, xd, -np.inf), axis=axis, keepdims=True)
    e = np.where(keep, np.exp(np.where(keep, xd - m, 0.0)), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    w = e / s

    def fn(g):
        return (np.expand_dims(g, axis) * w,)

    return _make(out, (x,), fn)


# ---------------------------------------------------------------- diagnostics


def hidden_grad_norms(hidden: Tensor) -> np.ndarray:
    """Per-position L2 norm of the retained gradient of ``hidden`` (last axis)."""
    if hidden.grad is None:
        raise TapeError("hidden state has no retained gradient; call retain_grad() before backward")
    g = hidden.grad
    # accumulate features in order so the result equals a plain scalar loop
    acc = np.zeros(g.shape[:-1])
    for k in range(g.shape[-1]):
        acc += g[..., k] * g[..., k]
    return np.sqrt(acc)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Tensor | Iterable[Tensor],
    h: float = 1e-6,
) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values. The error
    per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    params = [params] if isinstance(params, Tensor) else list(params)
    for p in params:
        p.grad = None
    with Tape():
        loss = f()
        if not np.isfinite(loss.data).all():
            raise NumericError("f returned a non-finite value")
        if loss._tape is not None:
            backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with Tape():
                fp = f().item()
            flat[i] = orig - h
            with Tape():
                fm = f().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError("f returned a non-finite value")
            numeric[i] = (fp - fm) / (2.0 * h)
        a = analytic.reshape(-1)
        err = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst

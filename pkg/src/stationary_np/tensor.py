"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are evaluated eagerly with numpy. While a :class:`Tape` is active
on the current thread, every operation with at least one ``requires_grad``
operand appends a node to it; :func:`backward` then sweeps the tape once in
reverse. Outside a tape nothing is recorded, so the same code doubles as a
cheap inference path.

    >>> x = tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> backward(y, tape)[x]
    array([6.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericalError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "AdamState",
    "tensor",
    "as_tensor",
    "backward",
    "adam_step",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "sqrt",
    "exp",
    "log",
    "cos",
    "sin",
    "tanh",
    "relu",
    "softplus",
    "power",
    "matmul",
    "affine",
    "conv1d",
    "pointwise",
    "reduce",
    "sum",
    "mean",
    "amax",
    "logsumexp",
    "softmax",
    "log_softmax",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "solve",
]

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive operations; confined to the creating thread."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, parents, vjp):
        self.nodes.append((out, parents, vjp))


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")
    __array_priority__ = 100.0
    __array_ufunc__ = None  # make ndarray binops defer to the reflected Tensor ops

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=5)}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: _getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad=False):
    return Tensor(np.array(data, dtype=np.float64), requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, vjp):
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, vjp)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"operands with shapes {a.shape} and {b.shape} do not broadcast",
            dim="broadcast", expected=a.shape, got=b.shape,
        ) from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    out = a.data / b.data
    return _result(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def square(a):
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0.0, 0.5 / np.where(out > 0.0, out, 1.0), 0.0)
        return (g * d,)

    return _result(out, (a,), vjp)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def cos(a):
    a = as_tensor(a)
    return _result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sin(a):
    a = as_tensor(a)
    return _result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    a = as_tensor(a)
    return _result(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),))


def softplus(a):
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    # sigmoid, evaluated without overflow
    sig = np.exp(-np.logaddexp(0.0, -x))
    return _result(out, (a,), lambda g: (g * sig,))


def power(a, p):
    a = as_tensor(a)
    if not np.isscalar(p):
        raise ShapeError("power only supports a scalar exponent", dim="exponent")
    p = float(p)
    if p < 0 and np.any(a.data == 0.0):
        raise DomainError("negative power of zero")
    if not p.is_integer() and np.any(a.data < 0.0):
        raise DomainError("fractional power of a negative value")
    out = a.data ** p
    return _result(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


_POINTWISE = {
    "relu": relu,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "neg": neg,
    "square": square,
    "sqrt": sqrt,
    "cos": cos,
    "sin": sin,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
}


def pointwise(op, *args):
    try:
        fn = _POINTWISE[op]
    except KeyError:
        raise ValueError(f"unknown pointwise op {op!r}") from None
    return fn(*args)


# --------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2", dim="rank")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"inner dimensions differ: {a.shape[-1]} vs {b.shape[-2]}",
            dim="inner", expected=a.shape[-1], got=b.shape[-2],
        )
    out = np.matmul(a.data, b.data)
    return _result(
        out, (a, b),
        lambda g: (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                   np.matmul(np.swapaxes(a.data, -1, -2), g)),
    )


def affine(x, weight, bias):
    """``x @ weight + bias`` over the last axis of ``x``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2:
        raise ShapeError("affine weight must be F_in x F_out", dim="weight rank")
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"F_in mismatch: input has {x.shape[-1]}, weight expects {weight.shape[0]}",
            dim="F_in", expected=weight.shape[0], got=x.shape[-1],
        )
    if bias.shape != (weight.shape[1],):
        raise ShapeError("bias must have shape (F_out,)", dim="F_out",
                         expected=(weight.shape[1],), got=bias.shape)
    if x.ndim == 1:
        return add(reshape(matmul(reshape(x, (1, -1)), weight), (-1,)), bias)
    return add(matmul(x, weight), bias)


def solve(a, b):
    """Solve ``a @ x = b`` for square ``a``; ``b`` may be a vector or a matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("solve needs a square matrix", dim="rows", got=a.shape)
    if b.shape[0] != a.shape[0]:
        raise ShapeError("right-hand side has the wrong number of rows", dim="rows",
                         expected=a.shape[0], got=b.shape[0])
    try:
        x = np.linalg.solve(a.data, b.data)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"linear solve failed: {exc}") from exc

    def vjp(g):
        gb = np.linalg.solve(a.data.T, g)
        ga = -np.outer(gb, x) if x.ndim == 1 else -gb @ x.T
        return ga, gb

    return _result(x, (a, b), vjp)


def conv1d(x, kernels, bias, padding=0):
    """Cross-correlation of ``x`` (C_in x L, optionally batched) with zero padding."""
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if kernels.ndim != 3:
        raise ShapeError("kernels must be C_out x C_in x K", dim="kernel rank")
    c_out, c_in, k = kernels.shape
    if k % 2 == 0:
        raise ShapeError(f"kernel width must be odd, got {k}", dim="K", got=k)
    if padding < 0:
        raise ShapeError("padding must be non-negative", dim="padding", got=padding)
    if x.ndim not in (2, 3):
        raise ShapeError("input must be C_in x L or B x C_in x L", dim="input rank")
    batched = x.ndim == 3
    xd = x.data if batched else x.data[None]
    if xd.shape[1] != c_in:
        raise ShapeError(
            f"C_in mismatch: input has {xd.shape[1]} channels, kernels expect {c_in}",
            dim="C_in", expected=c_in, got=xd.shape[1],
        )
    if bias.shape != (c_out,):
        raise ShapeError("bias must have shape (C_out,)", dim="C_out",
                         expected=(c_out,), got=bias.shape)
    length = xd.shape[2]
    out_len = length + 2 * padding - k + 1
    if out_len < 1:
        raise ShapeError(f"output length {out_len} < 1", dim="L", got=length)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    w2 = kernels.data.reshape(c_out, c_in * k)
    # im2col: cols[b, c * K + j, l] = xp[b, c, j + l]
    cols = np.stack([xp[:, :, j:j + out_len] for j in range(k)], axis=2)
    cols = cols.reshape(xp.shape[0], c_in * k, out_len)
    out = np.matmul(w2, cols) + bias.data[None, :, None]

    def vjp(g):
        gb = g if batched else g[None]
        gw = np.matmul(gb, cols.transpose(0, 2, 1)).sum(axis=0).reshape(c_out, c_in, k)
        gcols = np.matmul(w2.T, gb).reshape(gb.shape[0], c_in, k, out_len)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j:j + out_len] += gcols[:, :, j]
        gbias = gb.sum(axis=(0, 2))
        gx = gxp[:, :, padding:padding + length] if padding else gxp
        return (gx if batched else gx[0]), gw, gbias

    return _result(out if batched else out[0], (x, kernels, bias), vjp)


# ------------------------------------------------------------------ reductions


def _norm_axis(x, axis):
    if axis is None:
        return None
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    out = []
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise ShapeError(f"axis {ax} out of range for rank {x.ndim}", dim=f"axis {ax}")
        out.append(ax % x.ndim)
    return tuple(out)


def _check_nonempty(x, axes):
    sizes = [x.shape[a] for a in axes] if axes is not None else [x.size]
    if any(s == 0 for s in sizes):
        raise ShapeError("reduction over an empty axis", dim="axis", got=x.shape)


def _expand(g, x, axes, keepdims):
    if axes is not None and not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, x.shape)


def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(x, axis)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _result(out, (x,), lambda g: (_expand(g, x, axes, keepdims).copy(),))


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(x, axis)
    _check_nonempty(x, axes)
    n = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)
    return _result(out, (x,), lambda g: (_expand(g, x, axes, keepdims) / n,))


def amax(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(x, axis)
    _check_nonempty(x, axes)
    out = x.data.max(axis=axes, keepdims=True)

    def vjp(g):
        mask = x.data == out
        share = mask / mask.sum(axis=axes, keepdims=True)
        return (_expand(g, x, axes, keepdims) * share,)

    return _result(out if keepdims else np.squeeze(out, axis=axes), (x,), vjp)


def logsumexp(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(x, axis)
    _check_nonempty(x, axes)
    m = x.data.max(axis=axes, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(x.data - m).sum(axis=axes, keepdims=True)
    out = m + np.log(s)

    def vjp(g):
        return (_expand(g, x, axes, keepdims) * np.exp(x.data - out),)

    return _result(out if keepdims else np.squeeze(out, axis=axes), (x,), vjp)


_REDUCE = {"sum": sum, "mean": mean, "max": amax, "log_sum_exp": logsumexp}


def reduce(op, x, axis=None, keepdims=False):
    try:
        fn = _REDUCE[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None
    x = as_tensor(x)
    _check_nonempty(x, _norm_axis(x, axis))
    return fn(x, axis, keepdims)


def log_softmax(x, axis=-1):
    return sub(x, logsumexp(x, axis=axis, keepdims=True))


def softmax(x, axis=-1):
    return exp(log_softmax(x, axis))


# --------------------------------------------------------------- shape plumbing


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}", dim="size") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (x,), lambda g: (np.transpose(g, inv),))


def _getitem(x, idx):
    if isinstance(idx, Tensor):
        idx = idx.data.astype(int)
    out = x.data[idx]

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(out, (x,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}", dim=f"axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}", dim=f"axis {axis}") from None
    n = len(tensors)
    return _result(
        out, tuple(tensors),
        lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)),
    )


# ------------------------------------------------------------------- backward


class Gradients:
    """Gradient map returned by :func:`backward`, indexed by tensor."""

    def __init__(self, grads, tensors):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, t):
        g = self._grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g

    def __contains__(self, t):
        return id(t) in self._grads

    def get(self, t, default=None):
        return self._grads.get(id(t), default)


def backward(loss, tape):
    """Reverse sweep over ``tape`` seeded with d(loss)/d(loss) = 1."""
    loss = as_tensor(loss)
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}",
                         dim="loss", got=loss.shape)
    grads = {id(loss): np.ones_like(loss.data)}
    keep = {id(loss): loss}
    for out, parents, vjp in reversed(tape.nodes):
        g = grads.get(id(out))
        if g is None:
            continue
        for p, pg in zip(parents, vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg, dtype=np.float64), p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                keep[key] = p
    return Gradients(grads, keep)


# ----------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam step with decoupled weight decay, in place.

    ``params`` maps names to tensors and ``grads`` maps the same names to
    arrays; names missing from ``grads`` are treated as zero-gradient.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}",
                             dim=name, expected=p.shape, got=g.shape)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data - step - state.lr * state.weight_decay * p.data
    return params, state

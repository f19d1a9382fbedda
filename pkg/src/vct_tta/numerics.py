"""Dense tensor ops with a minimal reverse-mode tape.

Arrays are plain numpy ``ndarray`` values.  A :class:`Tensor` wraps one and
marks whether it depends on a watched parameter; every op below accepts a
``Tensor`` or an ``ndarray`` and only records itself on the active
:class:`GradTape` when at least one input requires a gradient.  Frozen
branches therefore cost nothing on the backward pass, while gradients still
flow *through* frozen weights towards the watched leaves.

Usage::

    with GradTape() as tape:
        w = tape.watch(w_array)
        loss = op_sum(matmul(x, w))
        (gw,) = tape.backward(loss, [w])
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

LN_EPS = 1e-6
RUN_DTYPE = np.float32
VERIFY_DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeUsageError(RuntimeError):
    """Raised when backward is requested without an active tape."""


class Tensor:
    """An ndarray plus a flag telling the tape whether it carries gradient."""

    __slots__ = ("data", "requires_grad", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, tape: GradTape | None = None, name: str = ""):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Sugar for the handful of binary ops used in model code.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


_local = threading.local()


def _active_tape() -> GradTape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of primitive ops, replayed in reverse by :meth:`backward`.

    A tape is single-threaded and owned by one run.  It is cleared after every
    backward pass, so one forward per backward.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []
        self._watched: list[Tensor] = []

    def __enter__(self) -> GradTape:
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.remove(self)

    def watch(self, array, name: str = "") -> Tensor:
        """Return a leaf tensor whose gradient :meth:`backward` may report."""
        data = array.data if isinstance(array, Tensor) else np.asarray(array)
        t = Tensor(data, requires_grad=True, tape=self, name=name)
        self._watched.append(t)
        return t

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        out.tape = self
        self.records.append((out, inputs, vjp))

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor, watched: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. each tensor in ``watched``.

        Unreached watched tensors get zero arrays of their own shape.
        """
        loss_data = loss.data if isinstance(loss, Tensor) else np.asarray(loss)
        if loss_data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss_data.shape}")
        grads: dict[int, np.ndarray] = {}
        if isinstance(loss, Tensor) and loss.requires_grad:
            grads[id(loss)] = np.ones_like(loss_data)
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            needs = tuple(isinstance(x, Tensor) and x.requires_grad for x in inputs)
            in_grads = vjp(g, needs)
            for x, need, gx in zip(inputs, needs, in_grads):
                if not need or gx is None:
                    continue
                key = id(x)
                if key in grads:
                    grads[key] = grads[key] + gx
                else:
                    grads[key] = gx
        result = []
        for w in watched:
            g = grads.get(id(w))
            result.append(np.zeros_like(w.data) if g is None else g.astype(w.dtype, copy=False))
        self.clear()
        return result


def backward(loss: Tensor, watched: Sequence[Tensor]) -> list[np.ndarray]:
    """Backward over the tape that recorded ``loss`` (or the active tape)."""
    tape = loss.tape if isinstance(loss, Tensor) and loss.tape is not None else _active_tape()
    if tape is None:
        raise TapeUsageError("backward() called without an active GradTape")
    return tape.backward(loss, watched)


# ---------------------------------------------------------------------------
# helpers


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _tracked(inputs: Iterable) -> bool:
    return any(isinstance(x, Tensor) and x.requires_grad for x in inputs)


def _emit(value: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    if not _tracked(inputs):
        return Tensor(value)
    tape = _active_tape()
    if tape is None:
        # Watched tensor used outside its tape context: fall back to its own tape.
        tape = next(x.tape for x in inputs if isinstance(x, Tensor) and x.requires_grad)
    out = Tensor(value, requires_grad=True)
    tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    av, bv = _data(a), _data(b)
    _check_broadcast(av, bv, "add")

    def vjp(g, needs):
        return (_unbroadcast(g, av.shape) if needs[0] else None,
                _unbroadcast(g, bv.shape) if needs[1] else None)

    return _emit(av + bv, (a, b), vjp)


def sub(a, b) -> Tensor:
    av, bv = _data(a), _data(b)
    _check_broadcast(av, bv, "sub")

    def vjp(g, needs):
        return (_unbroadcast(g, av.shape) if needs[0] else None,
                _unbroadcast(-g, bv.shape) if needs[1] else None)

    return _emit(av - bv, (a, b), vjp)


def mul(a, b) -> Tensor:
    av, bv = _data(a), _data(b)
    _check_broadcast(av, bv, "mul")

    def vjp(g, needs):
        return (_unbroadcast(g * bv, av.shape) if needs[0] else None,
                _unbroadcast(g * av, bv.shape) if needs[1] else None)

    return _emit(av * bv, (a, b), vjp)


def scale(x, c: float) -> Tensor:
    xv = _data(x)
    c = xv.dtype.type(c)

    def vjp(g, needs):
        return (g * c,)

    return _emit(xv * c, (x,), vjp)


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    xv = _data(x)
    cdf = 0.5 * (1.0 + erf(xv / np.sqrt(2.0)))
    out = (xv * cdf).astype(xv.dtype, copy=False)

    def vjp(g, needs):
        pdf = np.exp(-0.5 * xv * xv) / np.sqrt(2.0 * np.pi)
        return ((g * (cdf + xv * pdf)).astype(xv.dtype, copy=False),)

    return _emit(out, (x,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, numpy-style batching."""
    av, bv = _data(a), _data(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise DimensionError(f"matmul needs >= 2-D operands, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {av.shape} x {bv.shape}")
    try:
        out = av @ bv
    except ValueError as exc:
        raise DimensionError(f"matmul: incompatible batch dims {av.shape} x {bv.shape}") from exc

    def vjp(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if needs[1]:
            if bv.ndim == 2 and av.ndim > 2:
                # Shared weight: fold batch axes into rows instead of summing B products.
                ga2 = av.reshape(-1, av.shape[-1])
                gb = ga2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _emit(out, (a, b), vjp)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    xv = _data(x)
    try:
        out = xv.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape {xv.shape} -> {shape}") from exc

    def vjp(g, needs):
        return (g.reshape(xv.shape),)

    return _emit(out, (x,), vjp)


def transpose(x, axes: tuple[int, ...]) -> Tensor:
    xv = _data(x)
    inv = tuple(np.argsort(axes))

    def vjp(g, needs):
        return (np.transpose(g, inv),)

    return _emit(np.transpose(xv, axes), (x,), vjp)


def concat(xs: Sequence, axis: int) -> Tensor:
    vals = [_data(x) for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[v.shape for v in vals]}") from exc
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, tuple(xs), vjp)


def take(x, index: int, axis: int) -> Tensor:
    """Select one position along ``axis`` (drops the axis)."""
    xv = _data(x)

    def vjp(g, needs):
        gx = np.zeros_like(xv)
        sl = [slice(None)] * xv.ndim
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return _emit(np.take(xv, index, axis=axis), (x,), vjp)


def narrow(x, start: int, stop: int, axis: int) -> Tensor:
    """Contiguous slice ``start:stop`` along ``axis``."""
    xv = _data(x)
    sl = [slice(None)] * xv.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def vjp(g, needs):
        gx = np.zeros_like(xv)
        gx[sl] = g
        return (gx,)

    return _emit(xv[sl], (x,), vjp)


def broadcast_rows(x, n: int) -> Tensor:
    """Stack ``n`` copies of a vector into an ``n x d`` matrix."""
    xv = _data(x)

    def vjp(g, needs):
        return (g.sum(axis=0),)

    return _emit(np.broadcast_to(xv, (n,) + xv.shape).copy(), (x,), vjp)


def op_sum(x) -> Tensor:
    xv = _data(x)

    def vjp(g, needs):
        return (np.broadcast_to(g, xv.shape).astype(xv.dtype),)

    return _emit(np.asarray(xv.sum(), dtype=xv.dtype), (x,), vjp)


def op_mean(x) -> Tensor:
    xv = _data(x)
    n = xv.size

    def vjp(g, needs):
        return (np.broadcast_to(g / n, xv.shape).astype(xv.dtype),)

    return _emit(np.asarray(xv.mean(), dtype=xv.dtype), (x,), vjp)


# ---------------------------------------------------------------------------
# fused nonlinear primitives


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(x, axis: int = -1) -> Tensor:
    xv = _data(x)
    p = softmax_array(xv, axis)

    def vjp(g, needs):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit(p, (x,), vjp)


def layernorm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    xv, gv, bv = _data(x), _data(gamma), _data(beta)
    d = xv.shape[-1]
    if gv.shape != (d,) or bv.shape != (d,):
        raise DimensionError(f"layernorm: x {xv.shape}, gamma {gv.shape}, beta {bv.shape}")
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gv + bv

    def vjp(g, needs):
        red = tuple(range(g.ndim - 1))
        gx = ggam = gbet = None
        if needs[0]:
            dxhat = g * gv
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if needs[1]:
            ggam = (g * xhat).sum(axis=red)
        if needs[2]:
            gbet = g.sum(axis=red)
        return gx, ggam, gbet

    return _emit(out, (x, gamma, beta), vjp)


def entropy(logits) -> Tensor:
    """Per-row Shannon entropy (nats) of softmax(logits)."""
    lv = _data(logits)
    if lv.ndim != 2:
        raise DimensionError(f"entropy expects B x K logits, got {lv.shape}")
    logp = log_softmax_array(lv)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=-1)

    def vjp(g, needs):
        # dH/dz_k = -p_k (log p_k + H)
        return (-(g[:, None]) * p * (logp + h[:, None]),)

    return _emit(h, (logits,), vjp)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    lv = _data(logits)
    labels = np.asarray(labels)
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise DimensionError(f"cross_entropy: logits {lv.shape}, labels {labels.shape}")
    k = lv.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in 0..{k - 1}")
    b = lv.shape[0]
    logp = log_softmax_array(lv)
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def vjp(g, needs):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / b),)

    return _emit(np.asarray(loss, dtype=lv.dtype), (logits,), vjp)

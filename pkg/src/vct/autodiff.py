"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure pushing the output gradient back to them.  Calling :func:`backward`
on a scalar orders the recorded graph topologically (the "tape"), replays
the closures in reverse and then releases the graph, so a second backward
through the same graph is an error.

Only tensors with ``requires_grad=True`` (or built from one) are recorded;
frozen parameters and plain data cost nothing on the tape.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LN_EPS = 1e-5

_DEBUG = False
_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeConsumedError(RuntimeError):
    pass


def set_debug(flag: bool) -> None:
    """Turn on finite-value checks for every op output."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (inference and metric passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op}: non-finite value in output of shape {out.shape}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _DEBUG:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out._consumed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # stored without copying; later accumulation allocates instead of mutating
        t.grad = g if isinstance(g, np.ndarray) and g.dtype == DTYPE and g.flags.writeable else np.array(g, dtype=DTYPE)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: _accum(a, g * c), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * out), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: _accum(a, g / a.data), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * 0.5 / out), "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: _accum(a, 2.0 * g * a.data), "square")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * (1.0 - out * out)), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-form GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))

    def bw(g):
        dth = (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accum(a, g * (0.5 * (1.0 + th) + 0.5 * x * dth))

    return _make(0.5 * x * (1.0 + th), (a,), bw, "gelu")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.shape))

    return _make(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight grads use one flattened GEMM."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            _accum(x, (g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            _accum(weight, x2.T @ g2)
        if bias is not None and bias.requires_grad:
            _accum(bias, g2.sum(axis=0))

    return _make(out, parents, bw, "linear")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: _accum(a, np.transpose(g, inv)), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: _accum(a, g.reshape(a.shape)), "reshape")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing; gradient scatters back with accumulation."""
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accum(a, full)

    return _make(np.array(out, dtype=DTYPE), (a,), bw, "getitem")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis`` (rows of an embedding table, say)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)
    ax = axis % a.ndim

    def bw(g):
        full = np.zeros_like(a.data)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        fm = np.moveaxis(full, ax, 0)
        np.add.at(fm, idx, gm)
        _accum(a, full)

    return _make(out, (a,), bw, "take")


def gather_rows(a, indices) -> Tensor:
    """Batched row gather: ``a`` is (B, T, d), ``indices`` is (B, K) -> (B, K, d)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if a.ndim != 3 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows: shapes {a.shape} and {idx.shape} do not conform")
    b = np.arange(a.shape[0])[:, None]
    out = a.data[b, idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (b, idx), g)
        _accum(a, full)

    return _make(out, (a,), bw, "gather_rows")


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out, dtype=DTYPE), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, g * soft)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (a,), bw, "logsumexp")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        _accum(a, out * (g - np.sum(g * out, axis=axis, keepdims=True)))

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    z = a.data - m
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g):
        _accum(a, g - soft * np.sum(g, axis=axis, keepdims=True))

    return _make(out, (a,), bw, "log_softmax")


def layer_norm(x, gain=None, bias=None, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine."""
    x = as_tensor(x)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    parents = [x]
    out = xhat
    if gain is not None:
        gain = as_tensor(gain)
        if gain.shape != (d,):
            raise ShapeError(f"layer_norm: gain shape {gain.shape} vs feature dim {d}")
        parents.append(gain)
        out = out * gain.data
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (d,):
            raise ShapeError(f"layer_norm: bias shape {bias.shape} vs feature dim {d}")
        parents.append(bias)
        out = out + bias.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        if gain is not None and gain.requires_grad:
            _accum(gain, np.sum(g * xhat, axis=red))
        if bias is not None and bias.requires_grad:
            _accum(bias, np.sum(g, axis=red))
        if x.requires_grad:
            gx = g * gain.data if gain is not None else g
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(x, gx)

    return _make(out, parents, bw, "layer_norm")


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        _accum(pred, g * 2.0 * diff / n)
        _accum(target, -g * 2.0 * diff / n)

    return _make(np.asarray(np.mean(diff * diff)), (pred, target), bw, "mse")


def l2_normalize(a, axis: int = -1) -> Tensor:
    norm = sqrt(sum(square(a), axis=axis, keepdims=True))
    return div(a, norm)


# ---------------------------------------------------------------- backward


@dataclass
class Tape:
    """Topologically ordered view of the graph under one scalar output."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def release(self) -> None:
        for node in self.nodes:
            if node._backward is not None:
                node._consumed = True
            node._backward = None
            node._parents = ()


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every ``requires_grad`` tensor that feeds ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise TapeConsumedError("backward: the tape for this loss was already consumed")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not depend on any requires_grad tensor")
    tape = Tape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    loss.grad = grads[id(loss)].copy()
    for node in reversed(tape.nodes):
        if node._backward is None:
            continue
        g = node.grad
        if g is None:
            continue
        node._backward(g)
    tape.release()
    return tape


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    tol: float

    @property
    def max_rel_err(self) -> float:
        return float(self.rel_err.max()) if self.rel_err.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def relative_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    # floor keeps near-zero gradients from reporting roundoff as relative error
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``point`` with central differences."""
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"grad_check: step h={h} outside [1e-6, 1e-4]")
    x = Tensor(np.array(point.data, copy=True), requires_grad=True)
    out = f(x)
    backward(out)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    numeric = _central_differences(lambda: f(x).data, x, h)
    return GradCheckReport(analytic, numeric, relative_error(analytic, numeric, floor), tol)


def _central_differences(evaluate: Callable[[], np.ndarray], t: Tensor, h: float) -> np.ndarray:
    flat = t.data.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(evaluate())
        flat[i] = orig - h
        fm = float(evaluate())
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"grad_check: non-finite value at perturbed coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * h)
    return numeric.reshape(t.shape)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[tuple[str, Tensor]],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> dict[str, GradCheckReport]:
    """Perturb every scalar of every named parameter in place.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    each call.
    """
    items = list(params.items()) if isinstance(params, dict) else list(params)
    for _, p in items:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    reports = {}
    for name, p in items:
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        numeric = _central_differences(lambda: loss_fn().data, p, h)
        reports[name] = GradCheckReport(analytic, numeric, relative_error(analytic, numeric, floor), tol)
    return reports

"""Reverse-mode autodiff over dense float64 arrays.

Every backward rule is written with the same differentiable ops used in the
forward pass, so running :func:`grad` with ``create_graph=True`` yields
gradients that are themselves graph nodes and can be differentiated again.
"""

from __future__ import annotations

import contextlib
import threading
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class AutogradError(Exception):
    """Base class for graph construction and evaluation failures."""


class ShapeError(AutogradError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}")


class NonFiniteError(AutogradError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced NaN or Inf")


# Graphs are confined to one worker, so grad mode is tracked per thread.
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


def _check_finite() -> bool:
    return getattr(_state, "check_finite", True)


def _wanted(t: "Tensor") -> bool:
    """Whether the running backward pass needs a gradient for ``t``."""
    if not t.requires_grad:
        return False
    live = getattr(_state, "live", None)
    return live is None or id(t) in live


@contextlib.contextmanager
def grad_mode(enabled: bool):
    prev = _grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return grad_mode(False)


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle the per-op NaN/Inf check (on by default)."""
    prev = _check_finite()
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = prev


class Tensor:
    """A value in the computation graph.

    ``data`` is always a float64 ndarray. Leaves created with
    ``requires_grad=True`` are differentiation targets; interior nodes keep a
    reference to their parents and a backward closure.
    """

    __slots__ = ("data", "parents", "op", "requires_grad", "_backward", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.parents: tuple[Tensor, ...] = ()
        self.op = "leaf"
        self.requires_grad = requires_grad
        self._backward: Callable | None = None
        self.name = name

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swap_last(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, backward: Callable) -> Tensor:
    if _check_finite() and not np.isfinite(data).all():
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.parents = tuple(parents)
        out.requires_grad = True
        out._backward = backward
    else:
        out.parents = ()
        out.requires_grad = False
        out._backward = None
    return out


def _binary(op: str, fn, a, b) -> tuple[Tensor, Tensor, np.ndarray]:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fn(a.data, b.data)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None
    return a, b, data


# ---------------------------------------------------------------- broadcasting


def sum_to(x, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to ``shape`` (inverse of numpy broadcasting)."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src = x.shape
    return _node(data, (x,), "sum_to", lambda g: (broadcast_to(g, src),))


def broadcast_to(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None
    src = x.shape
    return _node(data, (x,), "broadcast_to", lambda g: (sum_to(g, src),))


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b, data = _binary("add", np.add, a, b)
    sa, sb = a.shape, b.shape
    return _node(data, (a, b), "add", lambda g: (sum_to(g, sa), sum_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b, data = _binary("sub", np.subtract, a, b)
    sa, sb = a.shape, b.shape
    return _node(data, (a, b), "sub", lambda g: (sum_to(g, sa), sum_to(neg(g), sb)))


def mul(a, b) -> Tensor:
    a, b, data = _binary("mul", np.multiply, a, b)

    def back(g):
        ga = sum_to(mul(g, b), a.shape) if _wanted(a) else None
        gb = sum_to(mul(g, a), b.shape) if _wanted(b) else None
        return ga, gb

    return _node(data, (a, b), "mul", back)


def div(a, b) -> Tensor:
    a, b, data = _binary("div", np.divide, a, b)

    def back(g):
        ga = sum_to(div(g, b), a.shape) if _wanted(a) else None
        gb = None
        if _wanted(b):
            gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _node(data, (a, b), "div", back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), "neg", lambda g: (neg(g),))


def matmul(a, b) -> Tensor:
    """Batched matrix product; leading dimensions broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def back(g):
        ga = sum_to(matmul(g, swap_last(b)), a.shape) if _wanted(a) else None
        gb = sum_to(matmul(swap_last(a), g), b.shape) if _wanted(b) else None
        return ga, gb

    return _node(data, (a, b), "matmul", back)


# ---------------------------------------------------------------- shape ops


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), "transpose", lambda g: (transpose(g, inv),))


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    src = x.shape
    return _node(data, (x,), "reshape", lambda g: (reshape(g, src),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[x.shape for x in xs]) from None
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def back(g):
        out = []
        for lo, hi, x in zip(bounds[:-1], bounds[1:], xs):
            if not x.requires_grad:
                out.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _node(data, xs, "concat", back)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    shape = xs[0].shape
    for x in xs:
        if x.shape != shape:
            raise ShapeError("stack", *[x.shape for x in xs])
    ax = axis % (len(shape) + 1)
    return concat([reshape(x, shape[:ax] + (1,) + shape[ax:]) for x in xs], axis=ax)


def getitem(x, idx) -> Tensor:
    """Basic slicing or integer-array gather."""
    x = as_tensor(x)
    try:
        data = x.data[idx]
    except IndexError:
        raise ShapeError("getitem", x.shape) from None
    src = x.shape
    return _node(np.array(data, copy=True), (x,), "getitem", lambda g: (scatter(g, idx, src),))


def _distinct_targets(idx, shape) -> bool:
    """True when ``idx`` never addresses an element twice (plain assignment is then exact)."""
    items = idx if isinstance(idx, tuple) else (idx,)
    arrays = [i for i, it in enumerate(items) if isinstance(it, (np.ndarray, list))]
    if any(it is None or isinstance(it, (bool, np.bool_)) for it in items):
        return False
    if not arrays:
        return True
    if len(arrays) > 1:
        return False
    pos = arrays[0]
    arr = np.asarray(items[pos])
    if arr.dtype.kind not in "iu" or arr.ndim != 1:
        return False
    # with an Ellipsis in front, the array's axis counts from the end
    axis = len(shape) - (len(items) - pos) if Ellipsis in items[:pos] else pos
    n = shape[axis]
    norm = np.where(arr < 0, arr + n, arr)
    return len(np.unique(norm)) == len(norm)


def scatter(g, idx, shape) -> Tensor:
    """Adjoint of :func:`getitem`: place ``g`` at ``idx`` in zeros of ``shape``."""
    g = as_tensor(g)
    data = np.zeros(shape)
    if _distinct_targets(idx, shape):
        data[idx] = g.data
    else:
        np.add.at(data, idx, g.data)
    return _node(data, (g,), "scatter", lambda gg: (getitem(gg, idx),))


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)
    src = x.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def back(g):
        if not keepdims:
            g = reshape(g, kept)
        return (broadcast_to(g, src),)

    return _node(np.asarray(data), (x,), "sum", back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- elementwise


def exp(x) -> Tensor:
    x = as_tensor(x)
    data = np.exp(x.data)

    def back(g):
        return (mul(g, ref()),)

    out = _node(data, (x,), "exp", back)
    ref = weakref.ref(out)  # no cycle through the closure
    return out


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), "log", lambda g: (div(g, x),))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    data = np.sqrt(x.data)

    def back(g):
        return (div(g, mul(ref(), 2.0)),)

    out = _node(data, (x,), "sqrt", back)
    ref = weakref.ref(out)  # no cycle through the closure
    return out


def abs(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _node(np.abs(x.data), (x,), "abs", lambda g: (mul(g, sign),))


def maximum(a, b) -> Tensor:
    a, b, data = _binary("maximum", np.maximum, a, b)
    pick_a = (a.data >= b.data).astype(np.float64)

    def back(g):
        ga = sum_to(mul(g, np.broadcast_to(pick_a, data.shape)), a.shape) if _wanted(a) else None
        gb = sum_to(mul(g, np.broadcast_to(1.0 - pick_a, data.shape)), b.shape) if _wanted(b) else None
        return ga, gb

    return _node(data, (a, b), "maximum", back)


def minimum(a, b) -> Tensor:
    a, b, data = _binary("minimum", np.minimum, a, b)
    pick_a = (a.data <= b.data).astype(np.float64)

    def back(g):
        ga = sum_to(mul(g, np.broadcast_to(pick_a, data.shape)), a.shape) if _wanted(a) else None
        gb = sum_to(mul(g, np.broadcast_to(1.0 - pick_a, data.shape)), b.shape) if _wanted(b) else None
        return ga, gb

    return _node(data, (a, b), "minimum", back)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    data = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def back(g):
        return (mul(g, mul(ref(), sub(1.0, ref()))),)

    out = _node(data, (x,), "sigmoid", back)
    ref = weakref.ref(out)  # no cycle through the closure
    return out


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    return _node(x.data * cdf, (x,), "gelu", lambda g: (mul(g, _gelu_d1(x, cdf)),))


def _gelu_d1(x: Tensor, cdf: np.ndarray) -> Tensor:
    xd = x.data
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return _node(cdf + xd * pdf, (x,), "gelu_d1", lambda g: (mul(g, _gelu_d2(x, pdf)),))


def _gelu_d2(x: Tensor, pdf: np.ndarray) -> Tensor:
    xd = x.data
    data = pdf * (2.0 - xd * xd)

    def back(g):
        raise AutogradError("gelu: derivatives above second order are not supported")

    return _node(data, (x,), "gelu_d2", back)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = sum(mul(g, ref()), axis=axis, keepdims=True)
        return (mul(ref(), sub(g, inner)),)

    out = _node(data, (x,), "softmax", back)
    ref = weakref.ref(out)  # no cycle through the closure
    return out


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def back(g):
        return (sub(g, mul(softmax(x, axis), sum(g, axis=axis, keepdims=True))),)

    return _node(data, (x,), "log_softmax", back)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    data = xc * rstd

    def back(g):
        # rstd rebuilt from ops so the rule itself stays differentiable
        xcn = sub(x, mean(x, axis=-1, keepdims=True))
        r = div(1.0, sqrt(add(mean(mul(xcn, xcn), axis=-1, keepdims=True), eps)))
        xhat = mul(xcn, r)
        gm = mean(g, axis=-1, keepdims=True)
        gx = mean(mul(g, xhat), axis=-1, keepdims=True)
        return (mul(sub(sub(g, gm), mul(xhat, gx)), r),)

    return _node(data, (x,), "layer_norm", back)


def l2_norm(x, axis=None) -> Tensor:
    """Square root of the sum of squares, over every element or along ``axis``.

    The gradient at the origin is taken to be zero.
    """
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    sq = (x.data * x.data).sum(axis=ax, keepdims=True)
    nk = np.sqrt(sq)
    keep_shape = nk.shape
    live = (nk > 0).astype(np.float64)
    denom_fix = 1.0 - live

    def back(g):
        ratio = mul(div(x, add(reshape(ref(), keep_shape), denom_fix)), live)
        return (mul(ratio, reshape(g, keep_shape)),)

    out_shape = tuple(d for i, d in enumerate(x.shape) if i not in ax)
    out = _node(nk.reshape(out_shape), (x,), "l2_norm", back)
    ref = weakref.ref(out)  # no cycle through the closure
    return out


def l1_distance(a, b) -> Tensor:
    """Sum of absolute elementwise differences."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("l1_distance", a.shape, b.shape)
    return sum(abs(sub(a, b)))


def cross_entropy(logits, targets, weights=None, axis: int = -1) -> Tensor:
    """Weighted mean of ``-sum(targets * log_softmax(logits))``.

    ``targets`` are one-hot (or soft) rows; ``weights`` holds one weight per
    row and the mean is normalised by their total.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError("cross_entropy", logits.shape, t.shape)
    per_row = neg(sum(mul(log_softmax(logits, axis), t), axis=axis))
    if weights is None:
        return mean(per_row)
    w = np.asarray(weights, dtype=np.float64)
    return div(sum(mul(per_row, w)), float(w.sum()))


# ---------------------------------------------------------------- differentiation


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrt: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each node in ``wrt``.

    With ``create_graph=True`` the returned tensors are graph nodes that can
    be differentiated again. Nodes that ``output`` does not depend on get an
    exact zero gradient rather than an error.
    """
    wrt = list(wrt)
    if output.size != 1:
        raise ShapeError("grad (output must be scalar)", output.shape)
    for w in wrt:
        if not w.requires_grad:
            raise AutogradError("grad: every wrt node must have requires_grad=True")
    if not output.requires_grad:
        return [Tensor(np.zeros_like(w.data)) for w in wrt]

    order = _toposort(output)
    # only nodes that depend on some wrt node need a gradient
    live = {id(w) for w in wrt}
    for node in order:
        if id(node) not in live and any(id(p) in live for p in node.parents):
            live.add(id(node))
    grads: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}
    outer_live = getattr(_state, "live", None)
    _state.live = live
    try:
        _backward_pass(order, grads, live, create_graph)
    finally:
        _state.live = outer_live
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(Tensor(np.zeros_like(w.data)) if g is None else g)
    return out


def _backward_pass(order, grads, live, create_graph: bool) -> None:
    with grad_mode(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._backward is None or id(node) not in live:
                continue
            for p, pg in zip(node.parents, node._backward(g)):
                if pg is None or id(p) not in live:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)

"""Random-instance generators for every differentiable op.

Each case builds input arrays and a scalar-valued function of Tensors. The
scalar is a fixed random projection of the op output so every output element
contributes to the gradient.
"""

from __future__ import annotations

import numpy as np

from adaptdet import autograd as ag


def _proj(out: ag.Tensor, w: np.ndarray) -> ag.Tensor:
    return ag.sum(ag.mul(out, w))


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _case(name, inputs, fn, rng):
    out_shape = fn(*[ag.Tensor(x) for x in inputs]).shape
    w = rng.normal(size=out_shape)

    def scalar(*ts):
        return _proj(fn(*ts), w)

    return name, inputs, scalar


def make_case(name: str, rng: np.random.Generator):
    n = rng.normal
    if name == "add":
        return _case(name, [n(size=(3, 4)), n(size=(4,))], ag.add, rng)
    if name == "sub":
        return _case(name, [n(size=(2, 3)), n(size=(2, 1))], ag.sub, rng)
    if name == "mul":
        return _case(name, [n(size=(3, 4)), n(size=(3, 4))], ag.mul, rng)
    if name == "div":
        return _case(name, [n(size=(3, 2)), rng.uniform(0.5, 2.0, size=(3, 2))], ag.div, rng)
    if name == "matmul":
        return _case(name, [n(size=(2, 3, 4)), n(size=(4, 5))], ag.matmul, rng)
    if name == "transpose":
        return _case(name, [n(size=(2, 3, 4))], lambda x: ag.mul(ag.transpose(x, (2, 0, 1)), ag.transpose(x, (2, 0, 1))), rng)
    if name == "concat":
        return _case(name, [n(size=(2, 3)), n(size=(2, 2))], lambda a, b: ag.mul(ag.concat([a, b], axis=1), ag.concat([b, a], axis=1)), rng)
    if name == "slice":
        return _case(name, [n(size=(4, 5))], lambda x: ag.mul(x[1:3, ::2], x[0:2, 1:4]), rng)
    if name == "gather":
        idx = rng.integers(0, 5, size=6)
        return _case(name, [n(size=(5, 3))], lambda x: ag.mul(ag.getitem(x, idx), ag.getitem(x, idx[::-1])), rng)
    if name == "sigmoid":
        return _case(name, [n(size=(3, 3))], ag.sigmoid, rng)
    if name == "gelu":
        return _case(name, [n(size=(3, 3))], ag.gelu, rng)
    if name == "softmax":
        return _case(name, [n(size=(3, 4))], lambda x: ag.softmax(x, axis=-1), rng)
    if name == "softmax_axis0":
        return _case(name, [n(size=(3, 4))], lambda x: ag.softmax(x, axis=0), rng)
    if name == "log_softmax":
        return _case(name, [n(size=(3, 4))], lambda x: ag.log_softmax(x, axis=-1), rng)
    if name == "layer_norm":
        return _case(name, [n(size=(3, 5))], ag.layer_norm, rng)
    if name == "l1_distance":
        a = n(size=(3, 4))
        b = a + _away_from_zero(rng, (3, 4))
        return _case(name, [a, b], lambda x, y: ag.mul(ag.l1_distance(x, y), ag.l1_distance(x, y)), rng)
    if name == "l2_norm":
        return _case(name, [n(size=(3, 4))], lambda x: ag.reshape(ag.l2_norm(x), (1,)), rng)
    if name == "cross_entropy":
        t = np.eye(4)[rng.integers(0, 4, size=3)]
        wts = rng.uniform(0.1, 1.0, size=3)
        return _case(name, [n(size=(3, 4))], lambda x: ag.reshape(ag.cross_entropy(x, t, wts), (1,)), rng)
    if name == "sum":
        return _case(name, [n(size=(3, 4))], lambda x: ag.mul(ag.sum(x, axis=0), ag.sum(x, axis=0)), rng)
    if name == "mean":
        return _case(name, [n(size=(3, 4))], lambda x: ag.mul(ag.mean(x, axis=1, keepdims=True), x), rng)
    if name == "exp":
        return _case(name, [n(size=(3, 2))], ag.exp, rng)
    if name == "log":
        return _case(name, [rng.uniform(0.5, 2.0, size=(3, 2))], ag.log, rng)
    if name == "sqrt":
        return _case(name, [rng.uniform(0.5, 2.0, size=(3, 2))], ag.sqrt, rng)
    if name == "maximum":
        a = n(size=(3, 3))
        return _case(name, [a, a + _away_from_zero(rng, (3, 3))], lambda x, y: ag.mul(ag.maximum(x, y), ag.maximum(x, y)), rng)
    if name == "minimum":
        a = n(size=(3, 3))
        return _case(name, [a, a + _away_from_zero(rng, (3, 3))], lambda x, y: ag.mul(ag.minimum(x, y), ag.minimum(x, y)), rng)
    if name == "reshape":
        return _case(name, [n(size=(2, 6))], lambda x: ag.mul(ag.reshape(x, (3, 4)), ag.reshape(x, (3, 4))), rng)
    raise KeyError(name)


OP_NAMES = [
    "add", "sub", "mul", "div", "matmul", "transpose", "concat", "slice", "gather",
    "sigmoid", "gelu", "softmax", "softmax_axis0", "log_softmax", "layer_norm",
    "l1_distance", "l2_norm", "cross_entropy", "sum", "mean", "exp", "log", "sqrt",
    "maximum", "minimum", "reshape",
]


def analytic_grad(scalar, inputs):
    ts = [ag.Tensor(x, requires_grad=True) for x in inputs]
    return [g.data for g in ag.grad(scalar(*ts), ts)]


def value(scalar, inputs) -> float:
    with ag.no_grad():
        return scalar(*[ag.Tensor(x) for x in inputs]).item()


def hvp(scalar, inputs, vs):
    """Gradient of <grad f, v> via a second reverse pass."""
    ts = [ag.Tensor(x, requires_grad=True) for x in inputs]
    gs = ag.grad(scalar(*ts), ts, create_graph=True)
    s = ag.Tensor(0.0)
    for g, v in zip(gs, vs):
        s = ag.add(s, ag.sum(ag.mul(g, v)))
    return [g.data for g in ag.grad(s, ts)]


def grad_dot(scalar, inputs, vs) -> float:
    return float(sum(np.sum(g * v) for g, v in zip(analytic_grad(scalar, inputs), vs)))

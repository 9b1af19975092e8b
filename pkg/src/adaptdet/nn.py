"""Functional layers over :mod:`adaptdet.autograd`.

Parameters live in flat ``{name: array}`` dicts. A parameter may carry one
extra leading batch axis (per-task copies during meta-learning); ``align``
reshapes it so that it broadcasts against inputs with any number of leading
axes.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag

Params = dict[str, np.ndarray]

MASK_VALUE = -1e9


def align(param, x_ndim: int, core_ndim: int):
    """Insert singleton axes after a parameter's batch axis to match ``x_ndim``."""
    if param.ndim <= core_ndim:
        return param
    want = x_ndim - core_ndim
    extra = want - (param.ndim - core_ndim)
    if extra <= 0:
        return param
    shape = param.shape[:1] + (1,) * extra + param.shape[1:]
    return ag.reshape(param, shape)


def linear(x, w, b=None):
    """``x @ w + b``; leading axes are folded so each product is one large GEMM."""
    din, dout = w.shape[-2], w.shape[-1]
    lead = tuple(x.shape[:-1])
    if w.ndim == 2:
        y = ag.reshape(ag.matmul(ag.reshape(x, (-1, din)), w), lead + (dout,))
    elif w.ndim == 3 and x.ndim >= 3 and x.shape[0] == w.shape[0]:
        y = ag.reshape(ag.matmul(ag.reshape(x, (x.shape[0], -1, din)), w), lead + (dout,))
    else:
        y = ag.matmul(x, align(w, x.ndim, 2))
    if b is not None:
        y = ag.add(y, align(b, y.ndim, 1))
    return y


def init_linear(rng: np.random.Generator, params: Params, name: str, din: int, dout: int, scale: float = 1.0, bias: bool = True) -> None:
    params[f"{name}_w"] = rng.normal(0.0, scale / np.sqrt(din), size=(din, dout))
    if bias:
        params[f"{name}_b"] = np.zeros(dout)


def split_heads(x, heads: int):
    *lead, n, d = x.shape
    x = ag.reshape(x, tuple(lead) + (n, heads, d // heads))
    k = len(lead)
    return ag.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))


def merge_heads(x):
    *lead, h, n, dh = x.shape
    k = len(lead)
    x = ag.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))
    return ag.reshape(x, tuple(lead) + (n, h * dh))


def attention_weights(q, k, heads: int, mask: np.ndarray | None = None):
    """Per-head attention probabilities ``[..., H, Nq, Nk]``."""
    dh = q.shape[-1] // heads
    scores = ag.mul(ag.matmul(split_heads(q, heads), ag.swap_last(split_heads(k, heads))), 1.0 / np.sqrt(dh))
    if mask is not None:
        scores = ag.add(scores, np.where(mask, 0.0, MASK_VALUE))
    return ag.softmax(scores, axis=-1)


def attention(q, k, v, heads: int, mask: np.ndarray | None = None, return_weights: bool = False):
    """Scaled dot-product attention; ``mask`` is True where attention is allowed."""
    w = attention_weights(q, k, heads, mask)
    out = merge_heads(ag.matmul(w, split_heads(v, heads)))
    return (out, w) if return_weights else out


def init_self_attention(rng, params: Params, name: str, dim: int) -> None:
    init_linear(rng, params, f"{name}.qkv", dim, 3 * dim)
    init_linear(rng, params, f"{name}.o", dim, dim)


def self_attention(x, p, name: str, heads: int, mask=None):
    qkv = linear(x, p[f"{name}.qkv_w"], p[f"{name}.qkv_b"])
    d = x.shape[-1]
    q, k, v = qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]
    return linear(attention(q, k, v, heads, mask), p[f"{name}.o_w"], p[f"{name}.o_b"])


def init_mlp(rng, params: Params, name: str, dims: list[int], last_scale: float = 1.0) -> None:
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        scale = last_scale if i == len(dims) - 2 else 1.0
        init_linear(rng, params, f"{name}.{i}", a, b, scale=scale)


def mlp(x, p, name: str, layers: int):
    """``layers`` linear maps with GELU between them."""
    for i in range(layers):
        x = linear(x, p[f"{name}.{i}_w"], p[f"{name}.{i}_b"])
        if i < layers - 1:
            x = ag.gelu(x)
    return x


def leaves(params: Params, names=None, requires_grad: bool = True) -> dict[str, ag.Tensor]:
    names = sorted(params) if names is None else names
    return {k: ag.Tensor(params[k], requires_grad=requires_grad) for k in names}


def constants(params: Params) -> dict[str, ag.Tensor]:
    return {k: ag.Tensor(v) for k, v in params.items()}

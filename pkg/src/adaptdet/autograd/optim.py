"""Plain SGD and decoupled-weight-decay Adam over named parameter dicts.

Updates are functional: they return new arrays and never mutate the inputs,
so a caller holding the old dict still sees the old values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError

Params = dict[str, np.ndarray]


def _check(params: Params, grads: Params, op: str) -> None:
    for name, g in grads.items():
        p = params[name]
        if p.shape != np.shape(g):
            raise ShapeError(f"{op}[{name}]", p.shape, np.shape(g))


def sgd_step(params: Params, grads: Params, lr: float) -> Params:
    """``p - lr * g`` for every parameter with a gradient; others pass through."""
    _check(params, grads, "sgd_step")
    return {k: (p - lr * np.asarray(grads[k]) if k in grads else p) for k, p in params.items()}


@dataclass
class OptimState:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def arrays(self) -> Params:
        out = {f"m.{k}": a for k, a in self.m.items()}
        out.update({f"v.{k}": a for k, a in self.v.items()})
        return out

    def hyper(self) -> dict:
        return {
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step": self.step,
        }

    @classmethod
    def restore(cls, hyper: dict, arrays: Params) -> "OptimState":
        m = {k[2:]: a for k, a in arrays.items() if k.startswith("m.")}
        v = {k[2:]: a for k, a in arrays.items() if k.startswith("v.")}
        return cls(
            lr=hyper["lr"],
            betas=tuple(hyper["betas"]),
            eps=hyper["eps"],
            weight_decay=hyper["weight_decay"],
            step=hyper["step"],
            m=m,
            v=v,
        )


def adamw_step(params: Params, grads: Params, state: OptimState, lr: float | None = None):
    """One AdamW update; returns ``(new_params, new_state)``.

    ``lr`` overrides ``state.lr`` for this step (used by schedules).
    """
    _check(params, grads, "adamw_step")
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    t = state.step + 1
    m, v = dict(state.m), dict(state.v)
    out = dict(params)
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        p = params[name]
        mk = b1 * m.get(name, np.zeros_like(p)) + (1.0 - b1) * g
        vk = b2 * v.get(name, np.zeros_like(p)) + (1.0 - b2) * g * g
        m[name], v[name] = mk, vk
        p = p * (1.0 - lr * state.weight_decay)
        out[name] = p - lr * (mk / c1) / (np.sqrt(vk / c2) + state.eps)
    new_state = OptimState(state.lr, state.betas, state.eps, state.weight_decay, t, m, v)
    return out, new_state


def linear_anneal(lr0: float, epoch: float, total_epochs: float) -> float:
    """Learning rate decayed linearly from ``lr0`` at epoch 0 to 0 at ``total_epochs``."""
    if total_epochs <= 0:
        return lr0
    return lr0 * max(0.0, 1.0 - epoch / total_epochs)

from .optim import OptimState, adamw_step, linear_anneal, sgd_step
from .tensor import (
    AutogradError,
    NonFiniteError,
    ShapeError,
    Tensor,
    abs,
    add,
    as_tensor,
    broadcast_to,
    concat,
    cross_entropy,
    div,
    exp,
    finite_checks,
    gelu,
    getitem,
    grad,
    grad_mode,
    l1_distance,
    l2_norm,
    layer_norm,
    log,
    log_softmax,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    no_grad,
    reshape,
    scatter,
    sigmoid,
    softmax,
    sqrt,
    stack,
    sub,
    sum,
    sum_to,
    swap_last,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]

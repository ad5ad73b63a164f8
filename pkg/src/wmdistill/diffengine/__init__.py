"""Minimal reverse-mode autodiff engine, parameter store and Adam."""
from .gradcheck import check_gradients, numeric_gradient, probe_coords, relative_error
from .optim import MissingGradientError, OptimizerState, adam_step
from .params import CheckpointError, NetworkParams, kaiming_uniform
from .tensor import (
    GraphConsumedError,
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    asinh,
    broadcast_to,
    clamp,
    complex_magnitude,
    concat,
    conv2d,
    div,
    embedding_lookup,
    exp,
    getitem,
    l2_norm,
    leaky_relu,
    linear,
    linear_map,
    log,
    matmul,
    mean_over_axes,
    mul,
    neg,
    no_grad,
    reshape,
    sigmoid,
    split,
    sqrt,
    square,
    stack,
    stop_gradient,
    straight_through,
    sub,
    sum_over_axes,
    tanh,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]

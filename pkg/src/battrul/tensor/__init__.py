from battrul.tensor.core import (
    ShapeError,
    Tensor,
    abs_,
    add,
    as_tensor,
    clip,
    concat,
    conv1d_depthwise,
    div,
    exp,
    gelu,
    layer_norm,
    log,
    lstm,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scalar_mul,
    sigmoid,
    slice_,
    softmax,
    sqrt,
    square,
    sub,
    sum_,
    tanh,
    transpose,
)
from battrul.tensor.kernels import BACKEND

__all__ = [
    "BACKEND", "ShapeError", "Tensor", "abs_", "add", "as_tensor", "clip", "concat",
    "conv1d_depthwise", "div", "exp", "gelu", "layer_norm", "log", "lstm", "matmul", "mean", "mul", "no_grad",
    "relu", "reshape", "scalar_mul", "sigmoid", "slice_", "softmax", "sqrt", "square",
    "sub", "sum_", "tanh", "transpose",
]

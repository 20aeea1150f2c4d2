"""Dense float64 tensors, reverse-mode differentiation and Adam."""
from .autodiff import (
    MASK_VALUE,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    cross_entropy,
    div,
    dropout,
    exp,
    gelu,
    index_select,
    layer_norm,
    log,
    log_softmax,
    masked_fill,
    matmul,
    mean,
    mul,
    reshape,
    softmax,
    softmax_rows,
    sub,
    swapaxes,
    take,
    tanh,
    topological_order,
    transpose,
    tsum,
)
from .optim import AdamState, adam_step

__all__ = [
    "MASK_VALUE", "Tensor", "AdamState", "adam_step", "add", "as_tensor", "backward",
    "concat", "cross_entropy", "div", "dropout", "exp", "gelu", "index_select",
    "layer_norm", "log", "log_softmax", "masked_fill", "matmul", "mean", "mul",
    "reshape", "softmax", "softmax_rows", "sub", "swapaxes", "take", "tanh",
    "topological_order", "transpose", "tsum",
]

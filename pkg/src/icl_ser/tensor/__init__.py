from .core import GradTape, Tensor, as_tensor, grad_enabled, no_grad
from .gradcheck import finite_diff_check
from .ops import (
    NonFiniteError,
    ShapeError,
    add,
    concat,
    div,
    dropout,
    exp,
    getitem,
    label_smoothing_ce,
    layer_norm,
    log,
    log_softmax,
    matmul,
    max,
    mean,
    mul,
    neg,
    pad_axis,
    power,
    relu,
    reshape,
    softmax,
    sub,
    sum,
    swapaxes,
    tanh,
    transpose,
)
from .optim import RAdam, RAdamState, radam_step, warmup_constant

__all__ = [
    "GradTape", "Tensor", "as_tensor", "grad_enabled", "no_grad", "finite_diff_check",
    "NonFiniteError", "ShapeError", "add", "concat", "div", "dropout", "exp", "getitem",
    "label_smoothing_ce", "layer_norm", "log", "log_softmax", "matmul", "max", "mean", "mul",
    "neg", "pad_axis", "power", "relu", "reshape", "softmax", "sub", "sum", "swapaxes", "tanh",
    "transpose", "RAdam", "RAdamState", "radam_step", "warmup_constant",
]

from .gradcheck import GradCheckReport, grad_check
from .tensor import (
    DEFAULT_DTYPE,
    GradTape,
    ShapeError,
    Tensor,
    active_tape,
    add,
    broadcast_add,
    concat,
    conv1x1,
    gelu,
    layer_norm,
    matmul,
    mean_all,
    mul,
    ones,
    reshape,
    scale,
    slice_axis,
    softmax_last_axis,
    sub,
    transpose,
    zeros,
)
from .tensorfile import TensorFileError, load_tensor, save_tensor

__all__ = [
    "DEFAULT_DTYPE",
    "GradCheckReport",
    "GradTape",
    "ShapeError",
    "Tensor",
    "TensorFileError",
    "active_tape",
    "add",
    "broadcast_add",
    "concat",
    "conv1x1",
    "gelu",
    "grad_check",
    "layer_norm",
    "load_tensor",
    "matmul",
    "mean_all",
    "mul",
    "ones",
    "reshape",
    "save_tensor",
    "scale",
    "slice_axis",
    "softmax_last_axis",
    "sub",
    "transpose",
    "zeros",
]

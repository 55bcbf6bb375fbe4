from app.tensor.ops import (
    Tensor,
    backward,
    broadcast_shape,
    conv2d,
    elementwise,
    group_norm,
    matmul,
    resample,
    softmax,
)
from app.tensor.gradcheck import gradient_check, numerical_gradient, relative_error

__all__ = [
    "Tensor",
    "backward",
    "broadcast_shape",
    "conv2d",
    "elementwise",
    "group_norm",
    "matmul",
    "resample",
    "softmax",
    "gradient_check",
    "numerical_gradient",
    "relative_error",
]

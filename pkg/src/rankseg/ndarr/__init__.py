from rankseg.ndarr.gradcheck import check_gradients, numerical_grad, relative_error
from rankseg.ndarr.ops import (
    add_gaussian_noise,
    avg_pool2d,
    conv2d,
    instance_norm,
    relu,
    softmax_channels,
    upsample_nearest2d,
    where_mask,
)
from rankseg.ndarr.optim import Adam, AdamState, adam_step
from rankseg.ndarr.tensor import (
    Tensor,
    TapeNode,
    as_tensor,
    concat,
    default_dtype,
    grad_enabled,
    no_grad,
    shadow64,
    stack,
)

__all__ = [
    "Adam",
    "AdamState",
    "Tensor",
    "TapeNode",
    "adam_step",
    "add_gaussian_noise",
    "as_tensor",
    "avg_pool2d",
    "check_gradients",
    "concat",
    "conv2d",
    "default_dtype",
    "grad_enabled",
    "instance_norm",
    "no_grad",
    "numerical_grad",
    "relative_error",
    "relu",
    "shadow64",
    "softmax_channels",
    "stack",
    "upsample_nearest2d",
    "where_mask",
]

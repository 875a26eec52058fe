from .optim import LRSchedule, OptimizerState, adamw_step, clip_gradients, cosine_lr, global_norm
from .rng import child_seed, stream
from .tensor import (
    NumericalError,
    Tensor,
    activation_count,
    as_tensor,
    backward,
    concat,
    dropout,
    exp,
    gelu,
    getitem,
    index_add,
    is_grad_enabled,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    no_grad,
    pick,
    relu,
    reshape,
    softmax,
    softplus,
    sqrt,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "LRSchedule", "NumericalError", "OptimizerState", "Tensor", "activation_count", "adamw_step", "as_tensor",
    "backward", "child_seed", "clip_gradients", "concat", "cosine_lr", "dropout", "exp",
    "gelu", "getitem", "global_norm", "index_add", "is_grad_enabled", "layer_norm", "linear",
    "log", "log_softmax", "matmul", "mean", "no_grad", "pick", "relu", "reshape", "softmax",
    "softplus", "sqrt", "stream", "tanh", "transpose", "tsum",
]

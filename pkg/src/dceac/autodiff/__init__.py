from dceac.autodiff.ops import (
    add,
    batch_norm,
    conv2d,
    conv_transpose2d,
    global_avg_pool,
    mse_loss,
    mul,
    relu,
    scale,
    sigmoid,
    sub,
    total,
)
from dceac.autodiff.optim import AdadeltaState, adadelta_step
from dceac.autodiff.tape import Tape, Tensor, record, unwrap

__all__ = [
    "AdadeltaState", "Tape", "Tensor", "adadelta_step", "add", "batch_norm", "conv2d",
    "conv_transpose2d", "global_avg_pool", "mse_loss", "mul", "record", "relu", "scale",
    "sigmoid", "sub", "total", "unwrap",
]

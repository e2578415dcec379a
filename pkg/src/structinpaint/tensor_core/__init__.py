from .adam import AdamState, adam_step
from .ops import (
    SIGMOID_EPS,
    add,
    avgpool2,
    conv2d,
    conv_output_size,
    fully_connected,
    getitem,
    log,
    maxpool2,
    mean,
    mul,
    pad_spatial,
    relu,
    reshape,
    sigmoid,
    square,
    sub,
    upsample_nearest2,
    where,
)
from .ops import sum as tsum
from .tensor import DimensionError, Tensor, as_tensor, backward, tape_from

__all__ = [
    "AdamState", "DimensionError", "SIGMOID_EPS", "Tensor", "adam_step", "add", "as_tensor",
    "avgpool2", "backward", "conv2d", "conv_output_size", "fully_connected", "getitem", "log",
    "maxpool2", "mean", "mul", "pad_spatial", "relu", "reshape", "sigmoid", "square", "sub",
    "tape_from", "tsum", "upsample_nearest2", "where",
]

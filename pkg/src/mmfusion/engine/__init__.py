"""Minimal dense-tensor engine with taped reverse-mode differentiation."""

from .ops import (
    BCE_EPS,
    BN_EPS,
    BN_MOMENTUM,
    BatchNormState,
    batch_norm,
    bce_loss,
    conv1d,
    conv2d,
    conv_lstm1d,
    depthwise_conv2d,
    dropout,
    relu,
    sigmoid,
    tanh,
    upsample_nearest,
)
from .optim import AdamState, PlateauSchedule, adam_step, plateau_step
from .rng import RngStream
from .tensor import (
    DEFAULT_DTYPE,
    EngineError,
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    as_tensor,
    backward,
    concat,
    narrow,
    power,
    reshape,
    tensor_mean,
    tensor_sum,
)

__all__ = [
    "BCE_EPS",
    "BN_EPS",
    "BN_MOMENTUM",
    "AdamState",
    "BatchNormState",
    "DEFAULT_DTYPE",
    "EngineError",
    "NonFiniteError",
    "PlateauSchedule",
    "RngStream",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "batch_norm",
    "bce_loss",
    "concat",
    "conv1d",
    "conv2d",
    "conv_lstm1d",
    "depthwise_conv2d",
    "dropout",
    "narrow",
    "plateau_step",
    "power",
    "relu",
    "reshape",
    "sigmoid",
    "tanh",
    "tensor_mean",
    "tensor_sum",
    "upsample_nearest",
]

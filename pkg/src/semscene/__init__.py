"""Desk-scale semantic scene completion.

Synthetic RGB-D scenes, a float64 reverse-mode tensor engine, a two-stream
2D segmentation network, a 2D-3D projection layer, an attention-gated 3D
completion network, and the SC/SSC evaluation protocol.
"""

from .errors import ContractViolation, EmptyMaskError, NumericalFailure
from .nnops import ConvSpec, conv, ddr_conv3d, mlp2, pool, same_padding
from .optim import MomentumSgd, grad_check, sgd_step
from .tensor import (Tensor, activation, concat_channels, no_grad, relu,
                     sigmoid, softmax_channel, tensor_mean, tensor_sum,
                     upsample_nearest)

__all__ = [
    "ContractViolation", "EmptyMaskError", "NumericalFailure",
    "ConvSpec", "conv", "ddr_conv3d", "mlp2", "pool", "same_padding",
    "MomentumSgd", "grad_check", "sgd_step",
    "Tensor", "activation", "concat_channels", "no_grad", "relu", "sigmoid",
    "softmax_channel", "tensor_mean", "tensor_sum", "upsample_nearest",
]

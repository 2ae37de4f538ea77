"""Layer vocabulary: convolutions, norms, activations, attention, each with a backward pass."""
from .gradcheck import GradCheckReport, gradcheck
from .layers import (
    GELU,
    AsymConvPair,
    BatchNorm2d,
    Conv2d,
    ConvBNReLU,
    DepthwiseConv2d,
    DSConvBlock,
    LayerNorm,
    Linear,
    Module,
    MultiHeadSelfAttention,
    Parameter,
    ReLU,
    Sequential,
    Upsample2x,
    ds_conv_param_count,
    grad_enabled,
    no_grad,
)

__all__ = [
    "GELU", "AsymConvPair", "BatchNorm2d", "Conv2d", "ConvBNReLU", "DepthwiseConv2d",
    "DSConvBlock", "GradCheckReport", "LayerNorm", "Linear", "Module",
    "MultiHeadSelfAttention", "Parameter", "ReLU", "Sequential", "Upsample2x",
    "ds_conv_param_count", "grad_enabled", "gradcheck", "no_grad",
]

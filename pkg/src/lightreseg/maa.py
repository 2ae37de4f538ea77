"""Multi-scale asymmetric attention for the encoder-decoder skips.

Pipeline for an input ``F0`` of shape ``(B, C, H, W)``::

    F0'  = ReLU(BN(conv5x5(F0)))
    Bk   = CA(colconv_k(rowconv_k(F0')))          k = 3, 7, 11
    att  = conv1x1(B3 + B7 + B11 + CA(F0'))
    out  = att * F0

``CA`` is channel attention with a learnable residual scale ``alpha``
(initialised to 0, which makes it an exact identity).
"""
from __future__ import annotations

import numpy as np

from .nn import AsymConvPair, Conv2d, ConvBNReLU, Module, Parameter
from .nn import functional as F
from .nn.layers import grad_enabled
from .tensor import Rng, default_dtype

BRANCH_KERNELS = (3, 7, 11)


def channel_attention_map(fmap_cn: np.ndarray) -> np.ndarray:
    """Row-softmax of the channel Gram matrix: ``softmax(F F^T)`` over ``(B, C, N)``."""
    gram = fmap_cn @ fmap_cn.transpose(0, 2, 1)
    return F.softmax(gram, axis=-1)


class ChannelAttention(Module):
    def __init__(self, alpha: float = 0.0):
        self.alpha = Parameter(np.array([alpha], dtype=default_dtype()))

    def forward(self, x):
        b, c, h, w = x.shape
        fcn = x.reshape(b, c, h * w)
        attn = channel_attention_map(fcn)
        a1 = attn.transpose(0, 2, 1) @ fcn
        alpha = self.alpha.data[0]
        out = x + alpha * a1.reshape(b, c, h, w)
        self._cache = (fcn, attn, a1) if grad_enabled() else None
        return out

    def backward(self, g):
        fcn, attn, a1 = self._cache
        b, c, n = fcn.shape
        g2 = g.reshape(b, c, n)
        self.alpha.accumulate(np.sum(g2 * a1))
        da1 = self.alpha.data[0] * g2
        dfcn = g2 + attn @ da1
        dattn = fcn @ da1.transpose(0, 2, 1)
        dgram = F.softmax_backward(dattn, attn)
        dfcn = dfcn + (dgram + dgram.transpose(0, 2, 1)) @ fcn
        return dfcn.reshape(g.shape)


class MAA(Module):
    def __init__(self, channels: int, rng: Rng, kernels=BRANCH_KERNELS):
        self.kernels = tuple(kernels)
        self.context = ConvBNReLU(channels, channels, rng, kernel=5)
        for k in self.kernels:
            setattr(self, f"branch{k}", AsymConvPair(channels, k, rng))
            setattr(self, f"ca{k}", ChannelAttention())
        self.ca_context = ChannelAttention()
        self.fuse = Conv2d(channels, channels, 1, rng)

    def forward(self, f0):
        ctx = self.context(f0)
        total = self.ca_context(ctx)
        # summation order fixed: context term, then k = 3, 7, 11
        for k in self.kernels:
            total = total + getattr(self, f"ca{k}")(getattr(self, f"branch{k}")(ctx))
        att = self.fuse(total)
        self._cache = (f0, att) if grad_enabled() else None
        return att * f0

    def backward(self, g):
        f0, att = self._cache
        gtotal = self.fuse.backward(g * f0)
        gctx = self.ca_context.backward(gtotal)
        for k in self.kernels:
            gctx = gctx + getattr(self, f"branch{k}").backward(getattr(self, f"ca{k}").backward(gtotal))
        return g * att + self.context.backward(gctx)


def param_count_maa(channels: int, kernels=BRANCH_KERNELS, norm: bool = True) -> int:
    """``25C^2+C`` context conv, ``2(kC^2+C)`` per branch, 4 alphas, ``C^2+C`` fuse, ``2C`` norm."""
    c = channels
    total = 25 * c * c + c
    total += sum(2 * (k * c * c + c) for k in kernels)
    total += len(kernels) + 1
    total += c * c + c
    if norm:
        total += 2 * c
    return total

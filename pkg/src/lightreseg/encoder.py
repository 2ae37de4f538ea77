"""Multi-scale feature extractor.

Scale 1 runs at input resolution; every later scale opens with a stride-2
block that halves the extents, followed by ``block_depth`` stride-1 blocks.
"""
from __future__ import annotations

import numpy as np

from .config import EncoderConfig
from .errors import ShapeError
from .nn import ConvBNReLU, DSConvBlock, Module, Sequential
from .tensor import Rng


def _block(cin, cout, rng, use_ds, stride=1):
    if use_ds:
        return DSConvBlock(cin, cout, rng, stride=stride)
    return ConvBNReLU(cin, cout, rng, stride=stride)


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: Rng, in_channels: int = 3):
        self.cfg = cfg
        cin = in_channels
        for s, cout in enumerate(cfg.channels, start=1):
            blocks = []
            if s > 1:
                blocks.append(_block(cin, cout, rng, cfg.use_ds_conv, stride=2))
                cin = cout
            for _ in range(cfg.block_depth):
                blocks.append(_block(cin, cout, rng, cfg.use_ds_conv))
                cin = cout
            setattr(self, f"scale{s}", Sequential(*blocks))

    def scale(self, s: int) -> Sequential:
        return getattr(self, f"scale{s}")

    def forward(self, x) -> list[np.ndarray]:
        h, w = x.shape[-2:]
        step = self.cfg.downsample
        if h % step or w % step:
            raise ShapeError(f"input extents {(h, w)} must be divisible by {step}; pad first")
        feats = []
        for s in range(1, self.cfg.num_scales + 1):
            x = self.scale(s)(x)
            feats.append(x)
        return feats

    def backward(self, grads: list[np.ndarray]) -> np.ndarray:
        """``grads[i]`` is the upstream gradient of scale ``i+1``'s output."""
        g = None
        for s in range(self.cfg.num_scales, 0, -1):
            gs = grads[s - 1] if g is None else grads[s - 1] + g
            g = self.scale(s).backward(gs)
        return g


def param_count_encoder(cfg: EncoderConfig, in_channels: int = 3) -> int:
    """Learnable scalars of :class:`Encoder` computed from the block formulas."""

    def block(cin, cout):
        norm = 2 * cout
        if cfg.use_ds_conv:
            return cin * 9 + cin + cin * cout + cout + norm
        return cin * cout * 9 + cout + norm

    total = 0
    cin = in_channels
    for s, cout in enumerate(cfg.channels, start=1):
        if s > 1:
            total += block(cin, cout)
            cin = cout
        for _ in range(cfg.block_depth):
            total += block(cin, cout)
            cin = cout
    return total

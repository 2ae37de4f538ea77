"""Encoder, bottleneck, skip attention and decoder assembled into one network."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .bottleneck import Bottleneck, param_count_bottleneck
from .config import VARIANTS, ModelConfig
from .encoder import Encoder, param_count_encoder
from .errors import DimensionError, ShapeError
from .maa import MAA, param_count_maa
from .nn import Conv2d, DSConvBlock, Module
from .nn import functional as F
from .tensor import Rng


class Decoder(Module):
    """Fuse from the deepest scale upwards, then a 1x1 head to class logits.

    ``fuse(a, b)`` concatenates along channels and applies one DS-Conv block
    that returns ``b``'s channel count.
    """

    def __init__(self, channels, num_classes, rng: Rng):
        n = len(channels)
        self.n = n
        setattr(self, f"fuse{n}", DSConvBlock(2 * channels[-1], channels[-1], rng))
        for s in range(n - 1, 0, -1):
            setattr(self, f"fuse{s}", DSConvBlock(channels[s] + channels[s - 1], channels[s - 1], rng))
        self.head = Conv2d(channels[0], num_classes, 1, rng)

    def fuse(self, s: int) -> DSConvBlock:
        return getattr(self, f"fuse{s}")

    def forward(self, deep, skips):
        """``deep`` is the bottleneck output; ``skips[i]`` is the (attended) scale-``i+1`` map."""
        n = self.n
        x = self.fuse(n)(np.concatenate([deep, skips[n - 1]], axis=1))
        self._split = {n: deep.shape[1]}
        for s in range(n - 1, 0, -1):
            up = F.upsample2x(x)
            self._split[s] = up.shape[1]
            x = self.fuse(s)(np.concatenate([up, skips[s - 1]], axis=1))
        return self.head(x)

    def backward(self, g):
        """Returns ``(grad_deep, [grad_skip_1, ..., grad_skip_n])``."""
        n = self.n
        gx = self.head.backward(g)
        gskips = [None] * n
        for s in range(1, n):
            gcat = self.fuse(s).backward(gx)
            k = self._split[s]
            gskips[s - 1] = gcat[:, k:]
            gx = F.upsample2x_backward(gcat[:, :k])
        gcat = self.fuse(n).backward(gx)
        k = self._split[n]
        gskips[n - 1] = gcat[:, k:]
        return gcat[:, :k], gskips


class LightReSeg(Module):
    """The segmentation network for one :class:`ModelConfig`.

    Call :meth:`forward` with a ``(B, 3, H, W)`` (or unbatched ``(3, H, W)``)
    image whose extents are multiples of ``cfg.input_pad_to``; the result is
    ``(B, num_classes, H, W)`` logits.
    """

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        enc = cfg.effective_encoder()
        self.encoder = Encoder(enc, rng)
        chans = enc.channels
        if cfg.use_maa:
            for s, c in enumerate(chans, start=1):
                setattr(self, f"maa{s}", MAA(c, rng))
        if cfg.use_transformer:
            self.bottleneck = Bottleneck(cfg.effective_bottleneck(), chans[-1], cfg.token_grid(), rng)
        self.decoder = Decoder(chans, cfg.num_classes, rng)

    @property
    def num_scales(self) -> int:
        return self.cfg.encoder.num_scales

    def forward(self, image):
        squeeze = image.ndim == 3
        x = image[None] if squeeze else image
        if x.shape[1] != 3:
            raise DimensionError(f"expected 3 input channels, got {x.shape[1]}")
        h, w = x.shape[-2:]
        m = self.cfg.input_pad_to
        if h % m or w % m:
            raise ShapeError(f"input extents {(h, w)} are not multiples of {m}; pad first")
        dtype = self.decoder.head.weight.data.dtype
        x = np.asarray(x, dtype=dtype)
        feats = self.encoder(x)
        if self.cfg.use_maa:
            skips = [getattr(self, f"maa{s}")(f) for s, f in enumerate(feats, start=1)]
        else:
            skips = feats
        deep = self.bottleneck(feats[-1]) if self.cfg.use_transformer else feats[-1]
        logits = self.decoder(deep, skips)
        return logits[0] if squeeze else logits

    def backward(self, g):
        squeeze = g.ndim == 3
        g = g[None] if squeeze else g
        gdeep, gskips = self.decoder.backward(g)
        n = self.num_scales
        if self.cfg.use_maa:
            gfeats = [getattr(self, f"maa{s}").backward(gskips[s - 1]) for s in range(1, n + 1)]
        else:
            gfeats = list(gskips)
        if self.cfg.use_transformer:
            gfeats[-1] = gfeats[-1] + self.bottleneck.backward(gdeep)
        else:
            gfeats[-1] = gfeats[-1] + gdeep
        gx = self.encoder.backward(gfeats)
        return gx[0] if squeeze else gx

    def parameter_store(self) -> "OrderedDict[str, np.ndarray]":
        return parameter_store(self)

    def module_param_counts(self) -> "OrderedDict[str, int]":
        """Learnable scalars grouped by top-level component."""
        counts: OrderedDict[str, int] = OrderedDict()
        for name, p in self.named_parameters():
            head = name.split(".")[0]
            key = "maa" if head.startswith("maa") else head
            counts[key] = counts.get(key, 0) + p.size
        return counts


def build(cfg: ModelConfig, seed: int | Rng = 0) -> LightReSeg:
    """Construct a network with parameters drawn deterministically from ``seed``."""
    rng = seed if isinstance(seed, Rng) else Rng(seed)
    return LightReSeg(cfg, rng)


def parameter_store(model: Module) -> "OrderedDict[str, np.ndarray]":
    """Ordered ``name -> array`` map of every learnable tensor."""
    return OrderedDict((name, p.data) for name, p in model.named_parameters())


def param_count(model: Module) -> int:
    return model.num_parameters()


def param_breakdown(cfg: ModelConfig) -> "OrderedDict[str, int]":
    """Closed-form parameter count per top-level component, without building the network."""
    enc = cfg.effective_encoder()
    chans = enc.channels

    def ds_block(cin, cout):
        return cin * 9 + cin + cin * cout + cout + 2 * cout

    decoder = ds_block(2 * chans[-1], chans[-1])
    for s in range(len(chans) - 1, 0, -1):
        decoder += ds_block(chans[s] + chans[s - 1], chans[s - 1])
    decoder += chans[0] * cfg.num_classes + cfg.num_classes
    out: OrderedDict[str, int] = OrderedDict()
    out["encoder"] = param_count_encoder(enc)
    out["maa"] = sum(param_count_maa(c) for c in chans) if cfg.use_maa else 0
    out["bottleneck"] = (param_count_bottleneck(cfg.effective_bottleneck(), chans[-1], cfg.token_grid())
                         if cfg.use_transformer else 0)
    out["decoder"] = decoder
    return out


def param_count_config(cfg: ModelConfig) -> int:
    """Closed-form total, independent of building the network."""
    return sum(param_breakdown(cfg).values())


def variant_config(variant: str, **kwargs) -> ModelConfig:
    if variant not in VARIANTS:
        raise KeyError(variant)
    return ModelConfig.for_variant(variant, **kwargs)

"""Stateful layers built on :mod:`lightreseg.nn.functional`.

A :class:`Module` caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``Parameter.grad`` during ``backward``.
Composite modules wire their children's backward calls by hand.
"""
from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from ..errors import ConfigError
from ..tensor import Rng, check_finite, default_dtype, seeded_init
from . import functional as F

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Skip backward caches; attention switches to its chunked path."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Parameter:
    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = np.zeros_like(data)

    def accumulate(self, g) -> None:
        self.grad += np.asarray(g).reshape(self.data.shape)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Parameter(shape={self.data.shape}, dtype={self.data.dtype})"


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        out = self.forward(*args, **kwargs)
        if isinstance(out, np.ndarray):
            check_finite(out, type(self).__name__)
        return out

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    # -- traversal ---------------------------------------------------------
    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if rest:
            getattr(self, head).set_buffer(rest, value)
        elif head in getattr(self, "_buffers", ()):
            setattr(self, head, value)
        else:
            raise KeyError(dotted)

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0

    def astype(self, dtype) -> "Module":
        """Cast every parameter and floating buffer in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for m in self.modules():
            for name in getattr(m, "_buffers", ()):
                setattr(m, name, getattr(m, name).astype(dtype))
        return self


class Sequential(Module):
    def __init__(self, *layers: Module):
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)
        self._n = len(layers)

    def __len__(self):
        return self._n

    def __getitem__(self, i) -> Module:
        return getattr(self, str(i))

    def forward(self, x):
        for i in range(self._n):
            x = self[i](x)
        return x

    def backward(self, g):
        for i in reversed(range(self._n)):
            g = self[i].backward(g)
        return g


def _param(rng: Rng, shape, scheme, fan=None, dtype=None) -> Parameter:
    return Parameter(seeded_init(rng, shape, scheme, fan=fan, dtype=dtype or default_dtype()))


class Conv2d(Module):
    """Standard convolution with per-output-channel bias."""

    def __init__(self, cin, cout, kernel, rng: Rng, stride=1, padding=None, bias=True):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if padding is None:
            padding = (kh // 2, kw // 2)
        elif isinstance(padding, int):
            padding = (padding, padding)
        self.stride = int(stride)
        self.padding = tuple(padding)
        self.weight = _param(rng, (cout, cin, kh, kw), "kaiming-normal")
        self.bias = _param(rng, (cout,), "zeros") if bias else None

    def forward(self, x):
        b = self.bias.data if self.bias is not None else None
        out, cache = F.conv2d(x, self.weight.data, b, self.stride, self.padding)
        self._cache = cache if grad_enabled() else None
        return out

    def backward(self, g):
        dx, dw, db = F.conv2d_backward(g, self._cache)
        self.weight.accumulate(dw)
        if self.bias is not None:
            self.bias.accumulate(db)
        return dx


class DepthwiseConv2d(Module):
    def __init__(self, channels, kernel, rng: Rng, stride=1, padding=None):
        k = kernel
        self.stride = int(stride)
        self.padding = (k // 2, k // 2) if padding is None else tuple(padding)
        self.weight = _param(rng, (channels, 1, k, k), "kaiming-normal", fan=k * k)
        self.bias = _param(rng, (channels,), "zeros")

    def forward(self, x):
        out, cache = F.depthwise_conv2d(x, self.weight.data, self.bias.data, self.stride, self.padding)
        self._cache = cache if grad_enabled() else None
        return out

    def backward(self, g):
        dx, dw, db = F.depthwise_conv2d_backward(g, self._cache)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        dtype = default_dtype()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x):
        if self.training:
            out, cache = F.batch_norm_train(x, self.gamma.data, self.beta.data, self.eps)
            _, _, _, mean, var, count = cache
            m = self.momentum
            unbiased = var * (count / (count - 1))
            dt = self.running_mean.dtype
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(dt)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(dt)
            self._cache = ("train", cache) if grad_enabled() else None
        else:
            out, cache = F.batch_norm_eval(x, self.gamma.data, self.beta.data,
                                           self.running_mean, self.running_var, self.eps)
            self._cache = ("eval", cache) if grad_enabled() else None
        return out

    def backward(self, g):
        mode, cache = self._cache
        fn = F.batch_norm_train_backward if mode == "train" else F.batch_norm_eval_backward
        dx, dgamma, dbeta = fn(g, cache)
        self.gamma.accumulate(dgamma)
        self.beta.accumulate(dbeta)
        return dx


class ReLU(Module):
    def forward(self, x):
        out, mask = F.relu(x)
        self._mask = mask
        return out

    def backward(self, g):
        return F.relu_backward(g, self._mask)


class GELU(Module):
    def forward(self, x):
        out, cache = F.gelu(x)
        self._cache = cache if grad_enabled() else None
        return out

    def backward(self, g):
        return F.gelu_backward(g, self._cache)


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as ``(D_in, D_out)``."""

    def __init__(self, din, dout, rng: Rng, bias=True):
        self.weight = _param(rng, (din, dout), "kaiming-normal", fan=din)
        self.bias = _param(rng, (dout,), "zeros") if bias else None

    def forward(self, x):
        b = self.bias.data if self.bias is not None else None
        out, cache = F.linear(x, self.weight.data, b)
        self._cache = cache if grad_enabled() else None
        return out

    def backward(self, g):
        dx, dw, db = F.linear_backward(g, self._cache)
        self.weight.accumulate(dw)
        if self.bias is not None:
            self.bias.accumulate(db)
        return dx


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        dtype = default_dtype()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x):
        out, cache = F.layer_norm(x, self.gamma.data, self.beta.data, self.eps)
        self._cache = cache if grad_enabled() else None
        return out

    def backward(self, g):
        dx, dgamma, dbeta = F.layer_norm_backward(g, self._cache)
        self.gamma.accumulate(dgamma)
        self.beta.accumulate(dbeta)
        return dx


class MultiHeadSelfAttention(Module):
    """Scaled dot-product attention over ``(B, T, D)`` tokens; bias-free QKV projection."""

    def __init__(self, dim, rng: Rng, heads=8, dim_head=64):
        inner = heads * dim_head
        self.heads = heads
        self.dim_head = dim_head
        self.w_qkv = _param(rng, (dim, 3 * inner), "kaiming-normal", fan=dim)
        self.w_out = _param(rng, (inner, dim), "kaiming-normal", fan=inner)
        self.b_out = _param(rng, (dim,), "zeros")

    def forward(self, z):
        keep = grad_enabled()
        out, cache = F.mhsa(z, self.w_qkv.data, self.w_out.data, self.b_out.data,
                            self.heads, self.dim_head, keep_cache=keep)
        self._cache = cache
        return out

    def attention_weights(self, z):
        """Per-head attention matrices ``(B, heads, T, T)`` for inspection."""
        bsz, t, _ = z.shape
        qkv = (z @ self.w_qkv.data).reshape(bsz, t, 3, self.heads, self.dim_head)
        q = qkv[:, :, 0].transpose(0, 2, 1, 3)
        k = qkv[:, :, 1].transpose(0, 2, 1, 3)
        return F.softmax((q @ k.transpose(0, 1, 3, 2)) / np.sqrt(self.dim_head), axis=-1)

    def backward(self, g):
        dz, dw_qkv, dw_out, db_out = F.mhsa_backward(g, self._cache)
        self.w_qkv.accumulate(dw_qkv)
        self.w_out.accumulate(dw_out)
        self.b_out.accumulate(db_out)
        return dz


class Upsample2x(Module):
    def forward(self, x):
        return F.upsample2x(x)

    def backward(self, g):
        return F.upsample2x_backward(g)


class ConvBNReLU(Module):
    """Standard ``k x k`` convolution followed by batch norm and ReLU."""

    def __init__(self, cin, cout, rng: Rng, kernel=3, stride=1):
        self.conv = Conv2d(cin, cout, kernel, rng, stride=stride)
        self.bn = BatchNorm2d(cout)
        self.act = ReLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))

    def backward(self, g):
        return self.conv.backward(self.bn.backward(self.act.backward(g)))


class DSConvBlock(Module):
    """Depthwise ``k x k`` filter, pointwise channel mix, batch norm, ReLU."""

    def __init__(self, cin, cout, rng: Rng, kernel=3, stride=1):
        self.depthwise = DepthwiseConv2d(cin, kernel, rng, stride=stride)
        self.pointwise = Conv2d(cin, cout, 1, rng)
        self.bn = BatchNorm2d(cout)
        self.act = ReLU()

    def forward(self, x):
        return self.act(self.bn(self.pointwise(self.depthwise(x))))

    def backward(self, g):
        g = self.bn.backward(self.act.backward(g))
        return self.depthwise.backward(self.pointwise.backward(g))


def ds_conv_param_count(cin: int, cout: int, k: int = 3) -> int:
    """Learnable scalars of the bare depthwise + pointwise pair (no norm)."""
    return cin * k * k + cin + cin * cout + cout


class AsymConvPair(Module):
    """``1 x k`` then ``k x 1`` convolution, ``C -> C`` at both stages, shape preserving."""

    def __init__(self, channels, k, rng: Rng):
        if k < 1 or k % 2 == 0:
            raise ConfigError(f"asymmetric kernel size must be odd, got {k}")
        self.k = k
        self.row = Conv2d(channels, channels, (1, k), rng, padding=(0, k // 2))
        self.col = Conv2d(channels, channels, (k, 1), rng, padding=(k // 2, 0))

    def forward(self, x):
        return self.col(self.row(x))

    def backward(self, g):
        return self.row.backward(self.col.backward(g))

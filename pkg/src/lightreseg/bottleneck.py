"""Global-reasoning stage over the deepest feature map.

The map is cut into ``P x P`` patches, projected to ``D`` dims, prefixed with a
class token, offset by a learned position table and passed through pre-norm
Transformer layers. The class token is then dropped and the remaining tokens
are projected back and folded into the original ``(C, h, w)`` layout.
"""
from __future__ import annotations

import numpy as np

from .config import BottleneckConfig
from .errors import DimensionError, ShapeError
from .nn import GELU, LayerNorm, Linear, Module, MultiHeadSelfAttention, Parameter
from .nn import functional as F
from .nn.layers import grad_enabled
from .tensor import Rng, seeded_init


def tokenize(fmap: np.ndarray, patch: int = 1) -> np.ndarray:
    """``(B, C, h, w)`` -> ``(B, Z, P*P*C)``; also accepts an unbatched ``(C, h, w)`` map.

    Patches are enumerated row-major over the patch grid. Inside a token the
    layout is ``(row-in-patch, col-in-patch, channel)`` with channel fastest.
    """
    squeeze = fmap.ndim == 3
    x = fmap[None] if squeeze else fmap
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"feature map {(h, w)} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    t = x.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 3, 5, 1)
    t = t.reshape(b, gh * gw, patch * patch * c)
    return t[0] if squeeze else t


def detokenize(tokens: np.ndarray, grid: tuple[int, int], patch: int, channels: int) -> np.ndarray:
    """Inverse of :func:`tokenize`."""
    squeeze = tokens.ndim == 2
    t = tokens[None] if squeeze else tokens
    b = t.shape[0]
    gh, gw = grid
    if t.shape[1:] != (gh * gw, patch * patch * channels):
        raise DimensionError(f"tokens {t.shape[1:]} do not match grid {grid}, P={patch}, C={channels}")
    x = t.reshape(b, gh, gw, patch, patch, channels).transpose(0, 5, 1, 3, 2, 4)
    x = x.reshape(b, channels, gh * patch, gw * patch)
    return x[0] if squeeze else x


class MLP(Module):
    def __init__(self, dim, hidden, rng: Rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.act = GELU()
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))

    def backward(self, g):
        return self.fc1.backward(self.act.backward(self.fc2.backward(g)))


class TransformerLayer(Module):
    """``u = z + MSA(LN(z))``; ``z' = u + MLP(LN(u))``."""

    def __init__(self, dim, rng: Rng, heads=8, dim_head=64, mlp_ratio=2):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, rng, heads=heads, dim_head=dim_head)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, rng)

    def forward(self, z):
        u = z + self.attn(self.ln1(z))
        return u + self.mlp(self.ln2(u))

    def backward(self, g):
        gu = g + self.ln2.backward(self.mlp.backward(g))
        return gu + self.ln1.backward(self.attn.backward(gu))


def transformer_layer_param_count(dim, heads=8, dim_head=64, mlp_ratio=2) -> int:
    inner = heads * dim_head
    hidden = mlp_ratio * dim
    return (2 * dim + dim * 3 * inner + inner * dim + dim
            + 2 * dim + dim * hidden + hidden + hidden * dim + dim)


class Bottleneck(Module):
    """Tokenise, embed, run ``cfg.layers`` Transformer layers, restore spatial layout.

    ``grid`` is the token grid at the training resolution. Inputs with a
    different grid use a bilinearly resampled copy of the position table.
    """

    def __init__(self, cfg: BottleneckConfig, channels: int, grid: tuple[int, int], rng: Rng):
        self.cfg = cfg
        self.channels = channels
        self.grid = tuple(grid)
        width = cfg.patch_size ** 2 * channels
        d = cfg.embed_dim
        self.proj = Parameter(seeded_init(rng, (width, d), "kaiming-normal", fan=width))
        self.cls_token = Parameter(seeded_init(rng, (d,), "normal-0.02"))
        self.pos_embed = Parameter(seeded_init(rng, (grid[0] * grid[1] + 1, d), "normal-0.02"))
        self.detok = Parameter(seeded_init(rng, (d, width), "kaiming-normal", fan=d))
        for i in range(cfg.layers):
            setattr(self, f"layer{i}", TransformerLayer(d, rng, cfg.heads, cfg.dim_head, cfg.mlp_ratio))
        self._interp = {}

    def layer(self, i: int) -> TransformerLayer:
        return getattr(self, f"layer{i}")

    def _resample_ops(self, grid):
        if grid not in self._interp:
            self._interp[grid] = (F.interp_matrix(grid[0], self.grid[0]),
                                  F.interp_matrix(grid[1], self.grid[1]))
        return self._interp[grid]

    def position_table(self, grid: tuple[int, int]) -> np.ndarray:
        """Position table for a token grid, resampled if it differs from the training grid."""
        pos = self.pos_embed.data
        if tuple(grid) == self.grid:
            return pos
        mh, mw = self._resample_ops(tuple(grid))
        table = pos[1:].reshape(self.grid[0], self.grid[1], -1)
        resized = np.einsum("ah,bw,hwd->abd", mh, mw, table, optimize=True).astype(pos.dtype)
        return np.concatenate([pos[:1], resized.reshape(grid[0] * grid[1], -1)], axis=0)

    def embed(self, tokens: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
        """``z0 = [x0; tokens @ E] + E_pos`` for ``(B, Z, P*P*C)`` tokens."""
        if tokens.shape[-1] != self.proj.data.shape[0]:
            raise DimensionError(f"token width {tokens.shape[-1]} != {self.proj.data.shape[0]}")
        b = tokens.shape[0]
        x = tokens @ self.proj.data
        cls = np.broadcast_to(self.cls_token.data, (b, 1, x.shape[-1]))
        return np.concatenate([cls, x], axis=1) + self.position_table(grid)

    def forward(self, fmap):
        p = self.cfg.patch_size
        b, c, h, w = fmap.shape
        if c != self.channels:
            raise DimensionError(f"bottleneck expects {self.channels} channels, got {c}")
        tokens = tokenize(fmap, p)
        grid = (h // p, w // p)
        z = self.embed(tokens, grid)
        for i in range(self.cfg.layers):
            z = self.layer(i)(z)
        out = detokenize(z[:, 1:] @ self.detok.data, grid, p, c)
        self._cache = (tokens, grid, z) if grad_enabled() else None
        return out

    def backward(self, g):
        tokens, grid, z = self._cache
        p = self.cfg.patch_size
        gy = tokenize(g, p)
        zt = z[:, 1:]
        self.detok.accumulate(zt.reshape(-1, zt.shape[-1]).T @ gy.reshape(-1, gy.shape[-1]))
        gz = np.zeros_like(z)
        gz[:, 1:] = gy @ self.detok.data.T
        for i in reversed(range(self.cfg.layers)):
            gz = self.layer(i).backward(gz)
        gpos = gz.sum(axis=0)
        if tuple(grid) == self.grid:
            self.pos_embed.accumulate(gpos)
        else:
            mh, mw = self._resample_ops(tuple(grid))
            gg = gpos[1:].reshape(grid[0], grid[1], -1)
            full = np.zeros_like(self.pos_embed.data)
            full[0] = gpos[0]
            full[1:] = np.einsum("ah,bw,abd->hwd", mh, mw, gg, optimize=True).reshape(-1, gg.shape[-1])
            self.pos_embed.accumulate(full)
        self.cls_token.accumulate(gz[:, 0].sum(axis=0))
        gx = gz[:, 1:]
        self.proj.accumulate(tokens.reshape(-1, tokens.shape[-1]).T @ gx.reshape(-1, gx.shape[-1]))
        gtok = gx @ self.proj.data.T
        return detokenize(gtok, grid, p, self.channels)


def param_count_bottleneck(cfg: BottleneckConfig, channels: int, grid: tuple[int, int]) -> int:
    width = cfg.patch_size ** 2 * channels
    d = cfg.embed_dim
    embed = width * d + d + (grid[0] * grid[1] + 1) * d + d * width
    return embed + cfg.layers * transformer_layer_param_count(d, cfg.heads, cfg.dim_head, cfg.mlp_ratio)

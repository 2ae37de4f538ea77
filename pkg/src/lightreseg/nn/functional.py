"""Forward and backward kernels on batched numpy arrays.

Every forward function returns ``(out, cache)`` and its ``*_backward``
counterpart maps ``(upstream, cache)`` to gradients. Images are ``(B, C, H, W)``;
sequence inputs carry their feature axis last.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

from ..errors import DimensionError

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def conv_out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


# -- convolution ------------------------------------------------------------
#
# Stride-1 kernels work on the padded map flattened to (B, C, Hp*Wp) with one
# spare zero row at the bottom. Tap (i, j) is then the contiguous slice starting
# at i*Wp + j of length Ho*Wp; the last kw-1 columns of every output row are
# junk and get cropped. Strided kernels slice taps directly.


def _pad2d(x, ph, pw, extra_rows=0):
    if ph == 0 and pw == 0 and extra_rows == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph + extra_rows), (pw, pw)))


def _tap(xp, i, j, ho, wo, stride):
    return xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def _out_extents(h, w, kh, kw, stride, padding, what):
    ho = conv_out_extent(h, kh, stride, padding[0])
    wo = conv_out_extent(w, kw, stride, padding[1])
    if ho < 1 or wo < 1:
        raise DimensionError(f"{what}: empty output for {(h, w)} with kernel {(kh, kw)}")
    return ho, wo


def _flat_layout(x, kh, kw, padding):
    bsz, c, h, w = x.shape
    ph, pw = padding
    xp = _pad2d(x, ph, pw, extra_rows=1)
    wp = w + 2 * pw
    return np.ascontiguousarray(xp).reshape(bsz, c, -1), wp


def _widen(g, wp):
    """``(B, O, Ho, Wo)`` -> ``(B, O, Ho*Wp)`` with zeros in the junk columns."""
    bsz, o, ho, wo = g.shape
    gw = np.zeros((bsz, o, ho, wp), dtype=g.dtype)
    gw[..., :wo] = g
    return gw.reshape(bsz, o, ho * wp)


def _unflatten_grad(dflat, x_shape, padding, wp):
    bsz, c, h, w = x_shape
    ph, pw = padding
    hp = h + 2 * ph + 1
    return np.ascontiguousarray(dflat.reshape(bsz, c, hp, wp)[:, :, ph:ph + h, pw:pw + w])


def conv2d(x, w, b=None, stride=1, padding=(0, 0)):
    """Cross-correlation with zero padding.

    ``x`` is ``(B, C_in, H, W)`` and ``w`` is ``(C_out, C_in, kh, kw)``. Kernel
    taps are accumulated in a fixed row-major order, so results are reproducible.
    """
    bsz, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    padding = tuple(padding)
    ho, wo = _out_extents(h, wd, kh, kw, stride, padding, "conv2d")
    dtype = np.result_type(x, w)
    if stride == 1:
        xf, wp = _flat_layout(x, kh, kw, padding)
        n = ho * wp
        taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
        acc = np.zeros((bsz, cout, n), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                off = i * wp + j
                acc += np.matmul(taps[i, j], xf[:, :, off:off + n])
        out = acc.reshape(bsz, cout, ho, wp)[..., :wo]
        cache = ("flat", x.shape, xf, wp, w, padding, b is not None)
    else:
        xp = _pad2d(x, *padding)
        out = np.zeros((bsz, cout, ho, wo), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                out += np.einsum("oc,bchw->bohw", w[:, :, i, j], _tap(xp, i, j, ho, wo, stride))
        cache = ("strided", x.shape, xp, stride, w, padding, b is not None)
    if b is not None:
        out = out + b.reshape(1, cout, 1, 1)
    return np.ascontiguousarray(out), cache


def conv2d_backward(g, cache):
    kind = cache[0]
    if kind == "flat":
        _, x_shape, xf, wp, w, padding, has_bias = cache
        cout, cin, kh, kw = w.shape
        gw = _widen(g, wp)
        n = gw.shape[-1]
        taps_t = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
        dxf = np.zeros_like(xf)
        dtaps = np.empty((kh, kw, cout, cin), dtype=w.dtype)
        for i in range(kh):
            for j in range(kw):
                off = i * wp + j
                xs = xf[:, :, off:off + n]
                dtaps[i, j] = np.matmul(gw, xs.transpose(0, 2, 1)).sum(axis=0)
                dxf[:, :, off:off + n] += np.matmul(taps_t[i, j], gw)
        dw = np.ascontiguousarray(dtaps.transpose(2, 3, 0, 1))
        dx = _unflatten_grad(dxf, x_shape, padding, wp)
    else:
        _, x_shape, xp, stride, w, (ph, pw), has_bias = cache
        cout, cin, kh, kw = w.shape
        ho, wo = g.shape[2], g.shape[3]
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w)
        for i in range(kh):
            for j in range(kw):
                xs = _tap(xp, i, j, ho, wo, stride)
                dw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, xs)
                dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                    np.einsum("oc,bohw->bchw", w[:, :, i, j], g)
        h, wd = x_shape[2], x_shape[3]
        dx = np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + wd])
    db = g.sum(axis=(0, 2, 3)) if has_bias else None
    return dx, dw, db


def depthwise_conv2d(x, w, b=None, stride=1, padding=(0, 0)):
    """One ``kh x kw`` filter per channel; ``w`` is ``(C, 1, kh, kw)``."""
    bsz, c, h, wd = x.shape
    if w.shape[0] != c or w.shape[1] != 1:
        raise DimensionError(f"depthwise: input has {c} channels, weight is {w.shape}")
    kh, kw = w.shape[2], w.shape[3]
    padding = tuple(padding)
    ho, wo = _out_extents(h, wd, kh, kw, stride, padding, "depthwise")
    dtype = np.result_type(x, w)
    if stride == 1:
        xf, wp = _flat_layout(x, kh, kw, padding)
        n = ho * wp
        acc = np.zeros((bsz, c, n), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                off = i * wp + j
                acc += w[:, 0, i, j].reshape(1, c, 1) * xf[:, :, off:off + n]
        out = acc.reshape(bsz, c, ho, wp)[..., :wo]
        cache = ("flat", x.shape, xf, wp, w, padding, b is not None)
    else:
        xp = _pad2d(x, *padding)
        out = np.zeros((bsz, c, ho, wo), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                out += w[:, 0, i, j].reshape(1, c, 1, 1) * _tap(xp, i, j, ho, wo, stride)
        cache = ("strided", x.shape, xp, stride, w, padding, b is not None)
    if b is not None:
        out = out + b.reshape(1, c, 1, 1)
    return np.ascontiguousarray(out), cache


def depthwise_conv2d_backward(g, cache):
    kind = cache[0]
    if kind == "flat":
        _, x_shape, xf, wp, w, padding, has_bias = cache
        c, _, kh, kw = w.shape
        gw = _widen(g, wp)
        n = gw.shape[-1]
        dxf = np.zeros_like(xf)
        dw = np.zeros_like(w)
        for i in range(kh):
            for j in range(kw):
                off = i * wp + j
                dw[:, 0, i, j] = np.einsum("bcn,bcn->c", gw, xf[:, :, off:off + n])
                dxf[:, :, off:off + n] += w[:, 0, i, j].reshape(1, c, 1) * gw
        dx = _unflatten_grad(dxf, x_shape, padding, wp)
    else:
        _, x_shape, xp, stride, w, (ph, pw), has_bias = cache
        c, _, kh, kw = w.shape
        ho, wo = g.shape[2], g.shape[3]
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w)
        for i in range(kh):
            for j in range(kw):
                xs = _tap(xp, i, j, ho, wo, stride)
                dw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, xs)
                dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                    w[:, 0, i, j].reshape(1, c, 1, 1) * g
        h, wd = x_shape[2], x_shape[3]
        dx = np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + wd])
    db = g.sum(axis=(0, 2, 3)) if has_bias else None
    return dx, dw, db


# -- normalisation ----------------------------------------------------------

def batch_norm_train(x, gamma, beta, eps=1e-5):
    """Normalise each channel by its batch statistics (biased variance)."""
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count < 2:
        raise DimensionError("batch_norm: train mode needs at least 2 values per channel")
    mean = x.mean(axis=axes, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)
    return out, (xhat, inv, gamma, mean.ravel(), var.ravel(), count)


def batch_norm_train_backward(g, cache):
    xhat, inv, gamma, _, _, count = cache
    axes = (0, 2, 3)
    dbeta = g.sum(axis=axes)
    dgamma = (g * xhat).sum(axis=axes)
    gx = g * gamma.reshape(1, -1, 1, 1)
    dx = inv * (gx - gx.mean(axis=axes, keepdims=True)
                - xhat * (gx * xhat).mean(axis=axes, keepdims=True))
    return dx, dgamma, dbeta


def batch_norm_eval(x, gamma, beta, running_mean, running_var, eps=1e-5):
    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x - running_mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    out = xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)
    return out, (xhat, inv, gamma)


def batch_norm_eval_backward(g, cache):
    xhat, inv, gamma = cache
    axes = (0, 2, 3)
    dx = g * (gamma * inv).reshape(1, -1, 1, 1)
    return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-token normalisation over the last axis followed by ``gamma * xhat + beta``."""
    if x.shape[-1] != gamma.shape[0]:
        raise DimensionError(f"layer_norm: last axis {x.shape[-1]} != {gamma.shape[0]}")
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(g, cache):
    xhat, inv, gamma = cache
    red = tuple(range(g.ndim - 1))
    dgamma = (g * xhat).sum(axis=red)
    dbeta = g.sum(axis=red)
    gx = g * gamma
    dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


# -- pointwise --------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0), x > 0


def relu_backward(g, mask):
    return g * mask


def gelu(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * cdf, (x, cdf)


def gelu_backward(g, cache):
    x, cdf = cache
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def softmax(x, axis=-1, inplace=False):
    z = x if inplace else x.copy()
    z -= x.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def softmax_backward(g, y, axis=-1):
    t = g * y
    s = t.sum(axis=axis, keepdims=True)
    np.subtract(g, s, out=t)
    t *= y
    return t


def log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# -- linear -----------------------------------------------------------------

def linear(x, w, b=None):
    """Affine map on the last axis; ``w`` is ``(D_in, D_out)``."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != {w.shape[0]}")
    out = x @ w
    if b is not None:
        out = out + b
    return out, (x, w, b is not None)


def linear_backward(g, cache):
    x, w, has_bias = cache
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    dw = x2.T @ g2
    db = g2.sum(axis=0) if has_bias else None
    return g @ w.T, dw, db


# -- upsampling -------------------------------------------------------------

def _up2_axis(x, axis):
    n = x.shape[axis]
    idx = np.arange(n)
    prev = np.take(x, np.maximum(idx - 1, 0), axis=axis)
    nxt = np.take(x, np.minimum(idx + 1, n - 1), axis=axis)
    even = 0.75 * x + 0.25 * prev
    odd = 0.75 * x + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(x.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _up2_axis_backward(g, axis):
    n = g.shape[axis] // 2
    shape = list(g.shape)
    shape[axis:axis + 1] = [n, 2]
    g = g.reshape(shape)
    ge = np.take(g, 0, axis=axis + 1)
    go = np.take(g, 1, axis=axis + 1)
    dx = np.moveaxis(0.75 * (ge + go), axis, 0).copy()
    ge = np.moveaxis(ge, axis, 0)
    go = np.moveaxis(go, axis, 0)
    # the 0.25 taps land on the clamped neighbours i-1 and i+1
    dx[:-1] += 0.25 * ge[1:]
    dx[0] += 0.25 * ge[0]
    dx[1:] += 0.25 * go[:-1]
    dx[-1] += 0.25 * go[-1]
    return np.moveaxis(dx, 0, axis)


def upsample2x(x):
    """Bilinear 2x upsampling with half-pixel centres (align_corners=False)."""
    return _up2_axis(_up2_axis(x, x.ndim - 2), x.ndim - 1)


def upsample2x_backward(g):
    return _up2_axis_backward(_up2_axis_backward(g, g.ndim - 1), g.ndim - 2)


def interp_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """``(n_out, n_in)`` bilinear resampling operator with half-pixel centres."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


# -- attention --------------------------------------------------------------

def mhsa(z, w_qkv, w_out, b_out, heads, dim_head, keep_cache=True, chunk=1024):
    """Multi-head scaled dot-product self-attention over ``(B, T, D)`` tokens.

    When ``keep_cache`` is false the queries are processed in chunks so the
    ``T x T`` score matrix is never fully materialised.
    """
    bsz, t, d = z.shape
    inner = heads * dim_head
    if w_qkv.shape != (d, 3 * inner):
        raise DimensionError(f"mhsa: w_qkv {w_qkv.shape} does not match D={d}, inner={inner}")
    scale = 1.0 / float(np.sqrt(dim_head))
    qkv = (z @ w_qkv).reshape(bsz, t, 3, heads, dim_head)
    q, k, v = np.ascontiguousarray(qkv.transpose(2, 0, 3, 1, 4))
    if keep_cache:
        scores = q @ k.transpose(0, 1, 3, 2)
        scores *= scale
        attn = softmax(scores, axis=-1, inplace=True)
        o = attn @ v
    else:
        # unnormalised exp(scores) @ v, divided by the row sums afterwards:
        # two fewer passes over each (chunk x T) block than softmax then matmul
        attn = None
        o = np.empty_like(q)
        qs = q * scale
        kt = k.transpose(0, 1, 3, 2)
        for s in range(0, t, chunk):
            a = qs[:, :, s:s + chunk] @ kt
            a -= a.max(axis=-1, keepdims=True)
            np.exp(a, out=a)
            denom = a.sum(axis=-1, keepdims=True)
            o[:, :, s:s + chunk] = (a @ v) / denom
    o2 = o.transpose(0, 2, 1, 3).reshape(bsz, t, inner)
    out = o2 @ w_out + b_out
    cache = (z, q, k, v, attn, o2, w_qkv, w_out, heads, dim_head, scale) if keep_cache else None
    return out, cache


def mhsa_backward(g, cache):
    z, q, k, v, attn, o2, w_qkv, w_out, heads, dim_head, scale = cache
    bsz, t, d = z.shape
    inner = heads * dim_head
    g2 = g.reshape(-1, d)
    dw_out = o2.reshape(-1, inner).T @ g2
    db_out = g2.sum(axis=0)
    do = np.ascontiguousarray((g @ w_out.T).reshape(bsz, t, heads, dim_head).transpose(0, 2, 1, 3))
    dattn = do @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ do
    ds = softmax_backward(dattn, attn)
    ds *= scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv], axis=0).transpose(1, 3, 0, 2, 4).reshape(bsz, t, 3 * inner)
    dw_qkv = z.reshape(-1, d).T @ dqkv.reshape(-1, 3 * inner)
    dz = dqkv @ w_qkv.T
    return dz, dw_qkv, dw_out, db_out


# -- loss -------------------------------------------------------------------

def cross_entropy(logits, target):
    """Mean pixel-wise cross-entropy of ``(B, K, H, W)`` logits against ``(B, H, W)`` labels."""
    k = logits.shape[1]
    target = np.asarray(target)
    if target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"target {target.shape} does not match logits {logits.shape}")
    logp = log_softmax(logits, axis=1)
    onehot = np.eye(k, dtype=logits.dtype)[target].transpose(0, 3, 1, 2)
    n = target.size
    loss = -float((logp * onehot).sum()) / n
    grad = (np.exp(logp) - onehot) / n
    return loss, grad

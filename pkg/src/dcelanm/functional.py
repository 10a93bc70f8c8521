"""Differentiable neural-network kernels on top of :mod:`dcelanm.tensor`.

Layouts are NCHW for images and ``[..., D]`` for token sequences.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import ShapeError, Tensor, make_result

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free and faster than a masked exp
    out = np.tanh(x * 0.5)
    out *= 0.5
    out += 0.5
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    """``x * sigmoid(x)``; the backward pass recomputes the sigmoid."""
    data = x.data

    def backward(g):
        s = _sigmoid(data)
        return (g * s * (1.0 + data * (1.0 - s)),)

    return make_result(data * _sigmoid(data), (x,), backward, "silu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    data = x.data
    cdf = 0.5 * (1.0 + erf(data / _SQRT2)).astype(data.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * data * data)
        return (g * (cdf + data * pdf),)

    return make_result(data * cdf, (x,), backward, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # -> [B, C, k, k, Ho, Wo] -> [B, C*k*k, Ho*Wo]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * k * k, ho * wo)


def _flat_padded(x: np.ndarray, padding: int, k: int) -> np.ndarray:
    """[B,C,H,W] -> [B, C, Hp*Wp + k - 1]: zero-padded rows laid end to end.

    A stride-1 output at (y, x) reads flat positions ``(y+i)*Wp + x + j``,
    so each kernel tap (i, j) is one contiguous slice of this buffer.
    """
    b, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    buf = np.zeros((b, c, hp * wp + k - 1), dtype=x.dtype)
    buf[:, :, : hp * wp].reshape(b, c, hp, wp)[:, :, padding : padding + h, padding : padding + w] = x
    return buf


def _conv_shifted(x, weight, padding):
    """Stride-1 convolution as k*k accumulated GEMMs over shifted slices."""
    b, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    wp = w + 2 * padding
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    span = ho * wp
    buf = _flat_padded(x, padding, k)
    taps = np.ascontiguousarray(weight.transpose(2, 3, 0, 1))  # [k, k, Cout, Cin]
    out = np.empty((b, cout, ho, wo), dtype=np.result_type(x, weight))
    acc = np.empty((cout, span), dtype=out.dtype)
    for n in range(b):
        np.matmul(taps[0, 0], buf[n, :, :span], out=acc)
        for i in range(k):
            for j in range(k):
                if i or j:
                    off = i * wp + j
                    acc += taps[i, j] @ buf[n, :, off : off + span]
        out[n] = acc.reshape(cout, ho, wp)[:, :, :wo]
    return out


def _conv_shifted_backward(g, x, weight, padding, need_x, need_w):
    b, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = hp - k + 1, wp - k + 1
    span = ho * wp
    buf = _flat_padded(x, padding, k) if need_w else None
    taps_t = np.ascontiguousarray(weight.transpose(2, 3, 1, 0)) if need_x else None  # [k, k, Cin, Cout]
    gw = np.zeros((k, k, cout, cin), dtype=g.dtype) if need_w else None
    gx = np.empty(x.shape, dtype=g.dtype) if need_x else None
    gflat = np.zeros((cout, ho, wp), dtype=g.dtype)
    for n in range(b):
        gflat[:, :, :wo] = g[n]
        g2 = gflat.reshape(cout, span)
        if need_w:
            for i in range(k):
                for j in range(k):
                    off = i * wp + j
                    gw[i, j] += g2 @ buf[n, :, off : off + span].T
        if need_x:
            gbuf = np.zeros((cin, hp * wp + k - 1), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    off = i * wp + j
                    gbuf[:, off : off + span] += taps_t[i, j] @ g2
            gx[n] = gbuf[:, : hp * wp].reshape(cin, hp, wp)[:, padding : padding + h, padding : padding + w]
    if need_w:
        gw = gw.transpose(2, 3, 0, 1)
    return gx, gw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x``: [B,Cin,H,W], ``weight``: [Cout,Cin,k,k]."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [B,C,H,W] input, got {list(x.shape)}")
    b, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if k != k2:
        raise ShapeError(f"conv2d needs square kernels, got {k}x{k2}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d input {h}x{w} smaller than kernel {k}x{k}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    pointwise = k == 1 and stride == 1 and padding == 0
    w2 = weight.data.reshape(cout, cin * k * k)

    if pointwise:
        out = np.matmul(w2, x.data.reshape(b, cin, h * w)).reshape(b, cout, ho, wo)
    elif stride == 1:
        out = _conv_shifted(x.data, weight.data, padding)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        out = np.matmul(w2, _im2col(xp, k, stride, ho, wo)).reshape(b, cout, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        need_x, need_w = x.requires_grad, weight.requires_grad
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = gw = None
        if pointwise:
            g2 = g.reshape(b, cout, ho * wo)
            xf = x.data.reshape(b, cin, h * w)
            if need_w:
                gw = sum(g2[n] @ xf[n].T for n in range(b)).reshape(weight.shape)
            if need_x:
                gx = np.matmul(w2.T, g2).reshape(x.shape)
        elif stride == 1:
            gx, gw = _conv_shifted_backward(g, x.data, weight.data, padding, need_x, need_w)
        else:
            g2 = g.reshape(b, cout, ho * wo)
            xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
            cols = _im2col(xp, k, stride, ho, wo)
            if need_w:
                gw = sum(g2[n] @ cols[n].T for n in range(b)).reshape(weight.shape)
            if need_x:
                dcols = np.matmul(w2.T, g2).reshape(b, cin, k, k, ho, wo)
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
                gx = gxp[:, :, padding : padding + h, padding : padding + w]
        return gx, gw, gb

    return make_result(out, (x, weight, bias), backward, "conv2d")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation of [B,C,H,W] input.

    In training mode the running statistics are updated in place
    (``new = (1 - momentum) * old + momentum * batch``, with the unbiased
    batch variance feeding ``running_var``).
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects [B,C,H,W] input, got {list(x.shape)}")
    b, c, h, w = x.shape
    if gamma.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels but gamma has shape {list(gamma.shape)}")
    n = b * h * w
    axes = (0, 2, 3)
    if training:
        if n < 2:
            raise ValueError(f"batch_norm in train mode needs B*H*W >= 2 per channel, got {n}")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mean = running_mean
        var = running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.astype(x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gg = g.sum(axis=axes) if beta.requires_grad else None
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                s1 = dxhat.mean(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
                gx = (dxhat - s1 - xhat * s2) * inv_std[None, :, None, None]
            else:
                gx = dxhat * inv_std[None, :, None, None]
        return gx, ggamma, gg

    return make_result(out, (x, gamma, beta), backward, "batch_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,):
        raise ShapeError(f"layer_norm: last dim {d} but gamma has shape {list(gamma.shape)}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv_std * (
                dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def max_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping ``k``x``k`` max pooling (``stride == k``).

    Ties route the gradient to the first maximum in row-major window order.
    """
    if k != stride:
        raise ValueError("only non-overlapping pooling (k == stride) is supported")
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"max_pool2d needs spatial dims divisible by {k}, got {h}x{w}")
    ho, wo = h // k, w // k
    win = x.data.reshape(b, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((b, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        return (gwin.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w),)

    return make_result(out, (x,), backward, "max_pool2d")


def _up2_axis(x: np.ndarray, axis: int) -> np.ndarray:
    x = np.moveaxis(x, axis, -1)
    prev = np.concatenate([x[..., :1], x[..., :-1]], axis=-1)
    nxt = np.concatenate([x[..., 1:], x[..., -1:]], axis=-1)
    out = np.empty(x.shape[:-1] + (2 * x.shape[-1],), dtype=x.dtype)
    out[..., 0::2] = 0.75 * x + 0.25 * prev
    out[..., 1::2] = 0.75 * x + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up2_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    gx = 0.75 * (ge + go)
    # even output i reads x[i-1] (clamped at 0); odd output i reads x[i+1] (clamped at n-1)
    gx[..., :-1] += 0.25 * ge[..., 1:]
    gx[..., :1] += 0.25 * ge[..., :1]
    gx[..., 1:] += 0.25 * go[..., :-1]
    gx[..., -1:] += 0.25 * go[..., -1:]
    return np.moveaxis(gx, -1, axis)


def bilinear_upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Bilinear x2 upsampling with half-pixel centres (align_corners=False)."""
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    out = _up2_axis(_up2_axis(x.data, 2), 3)

    def backward(g):
        return (_up2_axis_adjoint(_up2_axis_adjoint(g, 3), 2),)

    return make_result(out, (x,), backward, "bilinear_upsample")


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense [n_out, n_in] bilinear resampling matrix, half-pixel centres."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


# ---------------------------------------------------------------------------
# dense layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the trailing axis; ``weight`` is [D_in, D_out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} but weight is {list(weight.shape)}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    return make_result(out, (x, weight, bias), backward, "linear")

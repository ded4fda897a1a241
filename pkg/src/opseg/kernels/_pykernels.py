"""Pure numpy implementations of the hot kernels.

Used when the compiled extension is unavailable, or forced with
``OPSEG_KERNELS=python``.  Signatures match ``_ckernels`` exactly.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (n, c, ho, wo, kh, kw) -> (n, c, kh, kw, ho, wo)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def maxpool_forward(x, k, stride):
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    # np.argmax returns the first maximum, which is the scan-order tie rule
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    ky, kx = np.divmod(local, k)
    rows = np.arange(ho)[:, None] * stride + ky
    cols = np.arange(wo)[None, :] * stride + kx
    argmax = (rows * w + cols).astype(np.int64)
    return np.ascontiguousarray(out), argmax


def maxpool_backward(grad_out, argmax, h, w):
    n, c, ho, wo = grad_out.shape
    dx = np.zeros((n * c, h * w))
    idx = argmax.reshape(n * c, ho * wo)
    base = (np.arange(n * c) * (h * w))[:, None]
    np.add.at(dx.reshape(-1), (idx + base).ravel(), grad_out.reshape(-1))
    return dx.reshape(n, c, h, w)


def pad_flat(x, pad, kw):
    n, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    p = hp * wp
    xp = np.zeros((c, n * p + kw - 1))
    xp[:, :n * p].reshape(c, n, hp, wp)[:, :, pad:pad + h, pad:pad + w] = x.transpose(1, 0, 2, 3)
    return xp


def conv_flat_forward(xp, wt, n, hp, wp):
    kh, kw, k, c = wt.shape
    p = hp * wp
    length = (n - 1) * p + (hp - kh + 1) * wp
    out = np.zeros((k, n * p))
    acc = out[:, :length]
    for i in range(kh):
        for j in range(kw):
            s = i * wp + j
            acc += wt[i, j] @ xp[:, s:s + length]
    return out


def conv_flat_backward(gp, xp, wt, n, hp, wp, need_dx):
    kh, kw, k, c = wt.shape
    p = hp * wp
    length = (n - 1) * p + (hp - kh + 1) * wp
    g = gp[:, :length]
    dw = np.empty((kh, kw, k, c))
    dxp = np.zeros_like(xp) if need_dx else None
    for i in range(kh):
        for j in range(kw):
            s = i * wp + j
            dw[i, j] = g @ xp[:, s:s + length].T
            if need_dx:
                dxp[:, s:s + length] += wt[i, j].T @ g
    return dw, dxp

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels (float64, C-contiguous)."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _ceil_div(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    # b > 0; rounds toward +inf for either sign of a
    if a >= 0:
        return (a + b - 1) // b
    return -((-a) // b)


def im2col(double[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n, c * kh * kw, ho * wo), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, row, lo, hi
    cdef double* dst
    cdef const double* src
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        # valid ox satisfy 0 <= ox*stride + j - pad < w
                        lo = _ceil_div(pad - j, stride)
                        if lo < 0:
                            lo = 0
                        hi = _ceil_div(w + pad - j, stride)
                        if hi > wo:
                            hi = wo
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            dst = &out[b, row, oy * wo]
                            src = &x[b, ch, iy, 0]
                            for ox in range(lo, hi):
                                dst[ox] = src[ox * stride + j - pad]
    return out_arr


def col2im(double[:, :, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h,
           Py_ssize_t w, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
           Py_ssize_t pad):
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, row, lo, hi
    cdef double* dst
    cdef const double* src
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        lo = _ceil_div(pad - j, stride)
                        if lo < 0:
                            lo = 0
                        hi = _ceil_div(w + pad - j, stride)
                        if hi > wo:
                            hi = wo
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            dst = &out[b, ch, iy, 0]
                            src = &cols[b, row, oy * wo]
                            for ox in range(lo, hi):
                                dst[ox * stride + j - pad] += src[ox]
    return out_arr


def maxpool_forward(double[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h - k) // stride + 1
    cdef Py_ssize_t wo = (w - k) // stride + 1
    out_arr = np.empty((n, c, ho, wo), dtype=np.float64)
    arg_arr = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, ch, oy, ox, i, j, iy, ix, best_idx
    cdef double best, v
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        iy = oy * stride
                        ix = ox * stride
                        best = x[b, ch, iy, ix]
                        best_idx = iy * w + ix
                        for i in range(k):
                            for j in range(k):
                                v = x[b, ch, iy + i, ix + j]
                                # strict comparison keeps the first maximum in scan order
                                if v > best:
                                    best = v
                                    best_idx = (iy + i) * w + ix + j
                        out[b, ch, oy, ox] = best
                        arg[b, ch, oy, ox] = best_idx
    return out_arr, arg_arr


def maxpool_backward(double[:, :, :, ::1] grad_out, cnp.int64_t[:, :, :, ::1] argmax,
                     Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = grad_out.shape[0], c = grad_out.shape[1]
    cdef Py_ssize_t ho = grad_out.shape[2], wo = grad_out.shape[3]
    dx_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, ch, oy, ox, idx
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        idx = argmax[b, ch, oy, ox]
                        dx[b, ch, idx // w, idx % w] += grad_out[b, ch, oy, ox]
    return dx_arr


# -- stride-1 convolution by shifted GEMM ------------------------------------
#
# Each channel of the zero-padded batch is laid out as one flat row of
# length n*hp*wp (+ kw-1 slack).  For kernel offset (i, j) the input window
# is the contiguous column range starting at i*wp + j, so every offset is a
# single dgemm with no gather.  Output columns that fall in the padding
# border are garbage and are cropped (forward) or zero-filled (backward).

from scipy.linalg.cython_blas cimport dgemm


def pad_flat(double[:, :, :, ::1] x, Py_ssize_t pad, Py_ssize_t kw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t hp = h + 2 * pad, wp = w + 2 * pad, P = hp * wp
    xp_arr = np.zeros((c, n * P + kw - 1), dtype=np.float64)
    cdef double[:, ::1] xp = xp_arr
    cdef Py_ssize_t b, ch, y, xx, base
    with nogil:
        for ch in range(c):
            for b in range(n):
                base = b * P + pad * wp + pad
                for y in range(h):
                    for xx in range(w):
                        xp[ch, base + y * wp + xx] = x[b, ch, y, xx]
    return xp_arr


def conv_flat_forward(double[:, ::1] xp, double[:, :, :, ::1] wt, Py_ssize_t n,
                      Py_ssize_t hp, Py_ssize_t wp):
    """wt: (kh, kw, K, C).  Returns (K, n*hp*wp) with garbage border columns."""
    cdef Py_ssize_t kh = wt.shape[0], kw = wt.shape[1], k = wt.shape[2], c = wt.shape[3]
    cdef Py_ssize_t P = hp * wp, ho = hp - kh + 1
    cdef int L = <int>((n - 1) * P + ho * wp)
    cdef int ldx = <int>xp.shape[1], ldo = <int>(n * P), ic = <int>c, ik = <int>k
    out_arr = np.zeros((k, n * P), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double one = 1.0
    cdef char nn = b'N'
    cdef Py_ssize_t i, j, s
    with nogil:
        for i in range(kh):
            for j in range(kw):
                s = i * wp + j
                # out(K x L) += wt[i,j](K x C) @ xp[:, s:s+L](C x L)
                dgemm(&nn, &nn, &L, &ik, &ic, &one, &xp[0, s], &ldx,
                      &wt[i, j, 0, 0], &ic, &one, &out[0, 0], &ldo)
    return out_arr


def conv_flat_backward(double[:, ::1] gp, double[:, ::1] xp, double[:, :, :, ::1] wt,
                       Py_ssize_t n, Py_ssize_t hp, Py_ssize_t wp, bint need_dx):
    """gp: (K, n*hp*wp) output gradient with zeros on garbage columns.

    Returns (dw as (kh, kw, K, C), dxp shaped like xp or None).
    """
    cdef Py_ssize_t kh = wt.shape[0], kw = wt.shape[1], k = wt.shape[2], c = wt.shape[3]
    cdef Py_ssize_t P = hp * wp, ho = hp - kh + 1
    cdef int L = <int>((n - 1) * P + ho * wp)
    cdef int ldx = <int>xp.shape[1], ldg = <int>gp.shape[1], ic = <int>c, ik = <int>k
    dw_arr = np.zeros((kh, kw, k, c), dtype=np.float64)
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[:, ::1] dxp
    dxp_arr = None
    if need_dx:
        dxp_arr = np.zeros((c, xp.shape[1]), dtype=np.float64)
        dxp = dxp_arr
    cdef double one = 1.0, zero = 0.0
    cdef char nn = b'N', tt = b'T'
    cdef Py_ssize_t i, j, s
    with nogil:
        for i in range(kh):
            for j in range(kw):
                s = i * wp + j
                # dw[i,j](K x C) = gp(K x L) @ xp[:, s:s+L]^T
                dgemm(&tt, &nn, &ic, &ik, &L, &one, &xp[0, s], &ldx,
                      &gp[0, 0], &ldg, &zero, &dw[i, j, 0, 0], &ic)
                if need_dx:
                    # dxp[:, s:s+L](C x L) += wt[i,j]^T(C x K) @ gp(K x L)
                    dgemm(&nn, &tt, &L, &ic, &ik, &one, &gp[0, 0], &ldg,
                          &wt[i, j, 0, 0], &ic, &one, &dxp[0, s], &ldx)
    return dw_arr, dxp_arr

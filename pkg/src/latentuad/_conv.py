"""Strided valid cross-correlation primitives on batch-last arrays (C, H, W, N), float64.

Three operations cover conv and transposed-conv, forward and backward:

* ``correlate(x, W, stride)``        out[f,y,x,n] = sum W[f,c,i,j] x[c,y*s+i,x*s+j,n]
* ``correlate_adjoint(d, W, hw, s)`` adjoint of ``correlate`` w.r.t. ``x``
* ``correlate_wgrad(x, d, k, s)``    gradient of ``<d, correlate(x, W)>`` w.r.t. ``W``

Keeping the batch innermost lets the loop kernels stream contiguous
vectors. The numpy fallback uses sliding windows and tensordot.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._jit import USE_NUMBA, kernel


@kernel
def _correlate_nb(x, W, sh, sw):
    c, h, w, n = x.shape
    f, _, kh, kw = W.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    out = np.zeros((f, ho, wo, n))
    for o in range(f):
        for y in range(ho):
            for xx in range(wo):
                acc = out[o, y, xx]
                for ci in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            wt = W[o, ci, i, j]
                            src = x[ci, y * sh + i, xx * sw + j]
                            for b in range(n):
                                acc[b] += wt * src[b]
    return out


@kernel
def _adjoint_nb(d, W, h, w, sh, sw):
    f, ho, wo, n = d.shape
    _, c, kh, kw = W.shape
    dx = np.zeros((c, h, w, n))
    for o in range(f):
        for y in range(ho):
            for xx in range(wo):
                src = d[o, y, xx]
                for ci in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            wt = W[o, ci, i, j]
                            dst = dx[ci, y * sh + i, xx * sw + j]
                            for b in range(n):
                                dst[b] += wt * src[b]
    return dx


@kernel
def _wgrad_nb(x, d, kh, kw, sh, sw):
    c, h, w, n = x.shape
    f, ho, wo, _ = d.shape
    # eight partial sums per weight so the batch reduction vectorizes without fastmath
    acc = np.zeros((f, c, kh, kw, 8))
    nb = n - n % 8
    for o in range(f):
        for y in range(ho):
            for xx in range(wo):
                g = d[o, y, xx]
                for ci in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            src = x[ci, y * sh + i, xx * sw + j]
                            a = acc[o, ci, i, j]
                            for b0 in range(0, nb, 8):
                                for lane in range(8):
                                    a[lane] += src[b0 + lane] * g[b0 + lane]
                            for b in range(nb, n):
                                a[0] += src[b] * g[b]
    return acc.sum(axis=4)


def _windows(x, kernel_hw, stride):
    # (C, Ho, Wo, N, kh, kw)
    return sliding_window_view(x, tuple(kernel_hw), axis=(1, 2))[:, ::stride[0], ::stride[1]]


def _correlate_np(x, W, sh, sw):
    cols = _windows(x, W.shape[2:], (sh, sw))
    return np.tensordot(W, cols, axes=([1, 2, 3], [0, 4, 5]))


def _adjoint_np(d, W, h, w, sh, sw):
    c, kh, kw = W.shape[1:]
    _, ho, wo, n = d.shape
    cols = np.tensordot(W, d, axes=([0], [0]))  # (C, kh, kw, Ho, Wo, N)
    out = np.zeros((c, h, w, n))
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += cols[:, i, j]
    return out


def _wgrad_np(x, d, kh, kw, sh, sw):
    cols = _windows(x, (kh, kw), (sh, sw))
    return np.tensordot(d, cols, axes=([1, 2, 3], [1, 2, 3]))


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def correlate(x, W, stride, use_numba=USE_NUMBA):
    f = _correlate_nb if use_numba else _correlate_np
    return f(_c(x), _c(W), int(stride[0]), int(stride[1]))


def correlate_adjoint(d, W, out_hw, stride, use_numba=USE_NUMBA):
    f = _adjoint_nb if use_numba else _adjoint_np
    return f(_c(d), _c(W), int(out_hw[0]), int(out_hw[1]), int(stride[0]), int(stride[1]))


def correlate_wgrad(x, d, kernel_hw, stride, use_numba=USE_NUMBA):
    f = _wgrad_nb if use_numba else _wgrad_np
    return f(_c(x), _c(d), int(kernel_hw[0]), int(kernel_hw[1]), int(stride[0]), int(stride[1]))

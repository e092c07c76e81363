# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled conv kernels: C im2col/col2im around per-sample BLAS matmuls.

Samples are processed one at a time so batched and sequential calls give
bit-identical results (GEMM blocking depends on matrix shape).
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


cdef void _im2col(const real* x, real* col, int cin, int h, int w,
                  int k, int stride, int pad, int oh, int ow) noexcept nogil:
    """col[(ci*k + kh)*k + kw, oh*ow] = x padded/strided, row-major runs."""
    cdef int ci, kh, kw, r, ih, o_h, o_w, lo, hi
    cdef const real* src
    cdef real* dst
    for ci in range(cin):
        for kh in range(k):
            for kw in range(k):
                r = (ci * k + kh) * k + kw
                dst = col + <size_t>r * oh * ow
                for o_h in range(oh):
                    ih = o_h * stride + kh - pad
                    if ih < 0 or ih >= h:
                        for o_w in range(ow):
                            dst[o_h * ow + o_w] = 0
                        continue
                    src = x + (<size_t>ci * h + ih) * w
                    lo = 0
                    while lo * stride + kw - pad < 0:
                        lo += 1
                    hi = ow
                    while hi > lo and (hi - 1) * stride + kw - pad >= w:
                        hi -= 1
                    for o_w in range(lo):
                        dst[o_h * ow + o_w] = 0
                    for o_w in range(lo, hi):
                        dst[o_h * ow + o_w] = src[o_w * stride + kw - pad]
                    for o_w in range(hi, ow):
                        dst[o_h * ow + o_w] = 0


cdef void _col2im_add(const real* col, real* x, int cin, int h, int w,
                      int k, int stride, int pad, int oh, int ow) noexcept nogil:
    cdef int ci, kh, kw, r, ih, o_h, o_w, lo, hi
    cdef const real* src
    cdef real* dst
    for ci in range(cin):
        for kh in range(k):
            for kw in range(k):
                r = (ci * k + kh) * k + kw
                src = col + <size_t>r * oh * ow
                for o_h in range(oh):
                    ih = o_h * stride + kh - pad
                    if ih < 0 or ih >= h:
                        continue
                    dst = x + (<size_t>ci * h + ih) * w
                    lo = 0
                    while lo * stride + kw - pad < 0:
                        lo += 1
                    hi = ow
                    while hi > lo and (hi - 1) * stride + kw - pad >= w:
                        hi -= 1
                    for o_w in range(lo, hi):
                        dst[o_w * stride + kw - pad] += src[o_h * ow + o_w]


def _check(x, w):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("expected 4D input and kernel")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"kernel shape {w.shape} incompatible with input {x.shape}")
    if w.shape[2] != w.shape[3]:
        raise ValueError("kernels must be square")


def conv2d_forward(x, w, b, int stride=1, int pad=0):
    """Cross-correlate (N, Cin, H, W) with (Cout, Cin, k, k) -> (N, Cout, OH, OW)."""
    _check(x, w)
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    cdef int n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int cout = w.shape[0], k = w.shape[2]
    cdef int oh = (h + 2 * pad - k) // stride + 1
    cdef int ow = (wd + 2 * pad - k) // stride + 1
    cdef int i
    w2d = w.reshape(cout, cin * k * k)
    y = np.empty((n, cout, oh, ow), dtype=x.dtype)
    y2d = y.reshape(n, cout, oh * ow)
    if k == 1 and stride == 1 and pad == 0:
        # pointwise conv: matmul straight on the flattened input
        x2d = x.reshape(n, cin, h * wd)
        for i in range(n):
            np.matmul(w2d, x2d[i], out=y2d[i])
        y += b[None, :, None, None]
        return y
    col = np.empty((cin * k * k, oh * ow), dtype=x.dtype)
    for i in range(n):
        _im2col_dispatch(x[i], col, cin, h, wd, k, stride, pad, oh, ow)
        np.matmul(w2d, col, out=y2d[i])
    y += b[None, :, None, None]
    return y


def conv2d_backward(x, w, dout, int stride=1, int pad=0):
    """Gradients (dx, dw, db) for conv2d_forward."""
    _check(x, w)
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    dout = np.ascontiguousarray(dout)
    cdef int n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int cout = w.shape[0], k = w.shape[2]
    cdef int oh = dout.shape[2], ow = dout.shape[3]
    cdef int i

    db = dout.sum(axis=(0, 2, 3))
    w2d = w.reshape(cout, cin * k * k)
    dw2d = np.zeros((cout, cin * k * k), dtype=x.dtype)
    tmp = np.empty_like(dw2d)
    dout2d = dout.reshape(n, cout, oh * ow)
    if k == 1 and stride == 1 and pad == 0:
        x2d = x.reshape(n, cin, h * wd)
        dx = np.empty_like(x)
        dx2d = dx.reshape(n, cin, h * wd)
        for i in range(n):
            np.matmul(dout2d[i], x2d[i].T, out=tmp)
            dw2d += tmp
            np.matmul(w2d.T, dout2d[i], out=dx2d[i])
        return dx, dw2d.reshape(w.shape), db
    col = np.empty((cin * k * k, oh * ow), dtype=x.dtype)
    dcol = np.empty((cin * k * k, oh * ow), dtype=x.dtype)
    dx = np.zeros_like(x)
    for i in range(n):
        _im2col_dispatch(x[i], col, cin, h, wd, k, stride, pad, oh, ow)
        np.matmul(dout2d[i], col.T, out=tmp)
        dw2d += tmp
        np.matmul(w2d.T, dout2d[i], out=dcol)
        _col2im_dispatch(dcol, dx[i], cin, h, wd, k, stride, pad, oh, ow)
    return dx, dw2d.reshape(w.shape), db


def _im2col_dispatch(x, col, int cin, int h, int w, int k, int stride,
                     int pad, int oh, int ow):
    cdef const float[:, :, ::1] xf
    cdef float[:, ::1] colf
    cdef const double[:, :, ::1] xd
    cdef double[:, ::1] cold
    if x.dtype == np.float32:
        xf = x
        colf = col
        with nogil:
            _im2col[float](&xf[0, 0, 0], &colf[0, 0], cin, h, w, k, stride, pad, oh, ow)
    elif x.dtype == np.float64:
        xd = x
        cold = col
        with nogil:
            _im2col[double](&xd[0, 0, 0], &cold[0, 0], cin, h, w, k, stride, pad, oh, ow)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")


def _col2im_dispatch(col, x, int cin, int h, int w, int k, int stride,
                     int pad, int oh, int ow):
    cdef float[:, :, ::1] xf
    cdef const float[:, ::1] colf
    cdef double[:, :, ::1] xd
    cdef const double[:, ::1] cold
    if x.dtype == np.float32:
        xf = x
        colf = col
        with nogil:
            _col2im_add[float](&colf[0, 0], &xf[0, 0, 0], cin, h, w, k, stride, pad, oh, ow)
    elif x.dtype == np.float64:
        xd = x
        cold = col
        with nogil:
            _col2im_add[double](&cold[0, 0], &xd[0, 0, 0], cin, h, w, k, stride, pad, oh, ow)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")

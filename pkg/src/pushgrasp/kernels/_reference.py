"""Pure-numpy convolution forward/backward (stride-window + BLAS matmul).

Each batch sample is contracted separately so that results do not depend
on batch size (BLAS blocking can differ between shapes).
"""

from __future__ import annotations

import numpy as np


def _out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _windows(x_pad: np.ndarray, kernel: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """View of shape (C, OH, OW, k, k) over a padded (C, Hp, Wp) sample."""
    sc, sh, sw = x_pad.strides
    return np.lib.stride_tricks.as_strided(
        x_pad,
        (x_pad.shape[0], oh, ow, kernel, kernel),
        (sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                   stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlate (N, Cin, H, W) with (Cout, Cin, k, k) -> (N, Cout, OH, OW)."""
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w or kh != kw:
        raise ValueError(f"kernel shape {w.shape} incompatible with input {x.shape}")
    k = kh
    oh, ow = _out_size(h, k, stride, pad), _out_size(wd, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    y = np.empty((n, cout, oh, ow), dtype=x.dtype)
    for i in range(n):
        win = _windows(x[i], k, stride, oh, ow)
        y[i] = np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4]))
    y += b[None, :, None, None]
    return y


def conv2d_backward(x: np.ndarray, w: np.ndarray, dout: np.ndarray,
                    stride: int = 1, pad: int = 0):
    """Gradients (dx, dw, db) for conv2d_forward."""
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    k = w.shape[2]
    oh, ow = dout.shape[2], dout.shape[3]

    db = dout.sum(axis=(0, 2, 3))

    x_pad = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    dw = np.zeros_like(w)
    for i in range(n):
        win = _windows(x_pad[i], k, stride, oh, ow)
        dw += np.tensordot(dout[i], win, axes=([1, 2], [1, 2]))

    # dx: correlate the zero-dilated, re-padded dout with the flipped kernel.
    extra_h = (h + 2 * pad - k) % stride
    extra_w = (wd + 2 * pad - k) % stride
    lh = (oh - 1) * stride + 1
    lw = (ow - 1) * stride + 1
    edge = k - 1 - pad
    ph = lh + 2 * edge + extra_h
    pw = lw + 2 * edge + extra_w
    w_flip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).copy()  # (Cin, Cout, k, k)
    dx = np.empty_like(x)
    buf = np.zeros((cout, ph, pw), dtype=dout.dtype)
    for i in range(n):
        buf[:] = 0
        buf[:, edge:edge + lh:stride, edge:edge + lw:stride] = dout[i]
        win = _windows(buf, k, 1, h, wd)
        dx[i] = np.tensordot(w_flip, win, axes=([1, 2, 3], [0, 3, 4]))
    return dx, dw, db

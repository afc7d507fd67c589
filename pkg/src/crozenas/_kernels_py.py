"""Pure-numpy convolution and pooling kernels.

Fallback for the compiled ``_kernels`` extension. Both modules expose the
same functions with the same tie-breaking rules, so they are interchangeable
up to floating-point summation order.

All arrays are float64 in NCHW layout. Convolutions and 3x3 pools are
stride 1 with zero "same" padding.
"""

import numpy as np


def _pad_for(kernel, dilation):
    return dilation * (kernel - 1) // 2


def _shifted(xp, kh, kw, dilation, height, width):
    r, c = kh * dilation, kw * dilation
    return xp[:, :, r:r + height, c:c + width]


def conv2d_forward(x, w, b, dilation=1):
    n, c_in, height, width = x.shape
    c_out, _, k, _ = w.shape
    pad = _pad_for(k, dilation)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # im2col: (N, C_in, k, k, H, W)
    cols = np.empty((n, c_in, k, k, height, width))
    for kh in range(k):
        for kw in range(k):
            cols[:, :, kh, kw] = _shifted(xp, kh, kw, dilation, height, width)
    y = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3]))  # (C_out, N, H, W)
    y = y.transpose(1, 0, 2, 3) + b[None, :, None, None]
    return np.ascontiguousarray(y)


def conv2d_backward(gy, x, w, dilation=1):
    """Return ``(grad_x, grad_w, grad_b)`` for ``conv2d_forward``."""
    n, c_in, height, width = x.shape
    k = w.shape[2]
    pad = _pad_for(k, dilation)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    gw = np.empty_like(w)
    gxp = np.zeros_like(xp)
    for kh in range(k):
        for kw in range(k):
            xs = _shifted(xp, kh, kw, dilation, height, width)
            gw[:, :, kh, kw] = np.tensordot(gy, xs, axes=([0, 2, 3], [0, 2, 3]))
            contrib = np.tensordot(w[:, :, kh, kw], gy, axes=([0], [1]))
            _shifted(gxp, kh, kw, dilation, height, width)[...] += contrib.transpose(1, 0, 2, 3)
    gb = gy.sum(axis=(0, 2, 3))
    gx = gxp[:, :, pad:pad + height, pad:pad + width]
    return np.ascontiguousarray(gx), gw, gb


def _window_counts(height, width):
    ones = np.pad(np.ones((height, width)), 1)
    counts = np.zeros((height, width))
    for kh in range(3):
        for kw in range(3):
            counts += ones[kh:kh + height, kw:kw + width]
    return counts


def avgpool3_forward(x):
    height, width = x.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    acc = np.zeros_like(x)
    for kh in range(3):
        for kw in range(3):
            acc += xp[:, :, kh:kh + height, kw:kw + width]
    return acc / _window_counts(height, width)


def avgpool3_backward(gy):
    height, width = gy.shape[2:]
    scaled = gy / _window_counts(height, width)
    gxp = np.zeros(gy.shape[:2] + (height + 2, width + 2))
    for kh in range(3):
        for kw in range(3):
            gxp[:, :, kh:kh + height, kw:kw + width] += scaled
    return np.ascontiguousarray(gxp[:, :, 1:-1, 1:-1])


def maxpool3_forward(x):
    """Return ``(y, argidx)``; ``argidx`` is the first maximising window slot 0..8."""
    height, width = x.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    windows = np.stack([xp[:, :, kh:kh + height, kw:kw + width]
                        for kh in range(3) for kw in range(3)])
    argidx = windows.argmax(axis=0).astype(np.int64)
    y = np.take_along_axis(windows, argidx[None], axis=0)[0]
    return y, argidx


def maxpool3_backward(gy, argidx):
    height, width = gy.shape[2:]
    gxp = np.zeros(gy.shape[:2] + (height + 2, width + 2))
    for slot in range(9):
        kh, kw = divmod(slot, 3)
        gxp[:, :, kh:kh + height, kw:kw + width] += np.where(argidx == slot, gy, 0.0)
    return np.ascontiguousarray(gxp[:, :, 1:-1, 1:-1])

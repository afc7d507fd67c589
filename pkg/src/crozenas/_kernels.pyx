# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels (direct loops, float64, NCHW).

Mirrors ``_kernels_py`` function for function, including the max-pool
tie-break (first maximum in row-major window order).
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.float64_t f64
ctypedef cnp.int64_t i64


def conv2d_forward(const f64[:, :, :, ::1] x, const f64[:, :, :, ::1] w,
                   const f64[::1] b, int dilation=1):
    cdef Py_ssize_t n = x.shape[0], c_in = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t c_out = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t pad = dilation * (k - 1) // 2
    out = np.empty((n, c_out, H, W), dtype=np.float64)
    cdef f64[:, :, :, ::1] y = out
    cdef Py_ssize_t i, o, c, kh, kw, r, s, r0, r1, s0, s1, dr, ds
    cdef f64 wv
    with nogil:
        for i in range(n):
            for o in range(c_out):
                for r in range(H):
                    for s in range(W):
                        y[i, o, r, s] = b[o]
                for c in range(c_in):
                    for kh in range(k):
                        dr = kh * dilation - pad
                        r0 = 0 if dr >= 0 else -dr
                        r1 = H - dr if dr > 0 else H
                        for kw in range(k):
                            ds = kw * dilation - pad
                            s0 = 0 if ds >= 0 else -ds
                            s1 = W - ds if ds > 0 else W
                            wv = w[o, c, kh, kw]
                            for r in range(r0, r1):
                                for s in range(s0, s1):
                                    y[i, o, r, s] += wv * x[i, c, r + dr, s + ds]
    return out


def conv2d_backward(const f64[:, :, :, ::1] gy, const f64[:, :, :, ::1] x,
                    const f64[:, :, :, ::1] w, int dilation=1):
    cdef Py_ssize_t n = x.shape[0], c_in = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t c_out = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t pad = dilation * (k - 1) // 2
    gx_arr = np.zeros((n, c_in, H, W), dtype=np.float64)
    gw_arr = np.zeros((c_out, c_in, k, k), dtype=np.float64)
    gb_arr = np.zeros(c_out, dtype=np.float64)
    cdef f64[:, :, :, ::1] gx = gx_arr
    cdef f64[:, :, :, ::1] gw = gw_arr
    cdef f64[::1] gb = gb_arr
    cdef Py_ssize_t i, o, c, kh, kw, r, s, r0, r1, s0, s1, dr, ds
    cdef f64 wv, acc, g
    with nogil:
        for i in range(n):
            for o in range(c_out):
                acc = 0.0
                for r in range(H):
                    for s in range(W):
                        acc = acc + gy[i, o, r, s]
                gb[o] += acc
                for c in range(c_in):
                    for kh in range(k):
                        dr = kh * dilation - pad
                        r0 = 0 if dr >= 0 else -dr
                        r1 = H - dr if dr > 0 else H
                        for kw in range(k):
                            ds = kw * dilation - pad
                            s0 = 0 if ds >= 0 else -ds
                            s1 = W - ds if ds > 0 else W
                            wv = w[o, c, kh, kw]
                            acc = 0.0
                            for r in range(r0, r1):
                                for s in range(s0, s1):
                                    g = gy[i, o, r, s]
                                    acc = acc + g * x[i, c, r + dr, s + ds]
                                    gx[i, c, r + dr, s + ds] += wv * g
                            gw[o, c, kh, kw] += acc
    return gx_arr, gw_arr, gb_arr


cdef inline Py_ssize_t _count(Py_ssize_t r, Py_ssize_t n) nogil:
    cdef Py_ssize_t lo = r - 1 if r > 0 else 0
    cdef Py_ssize_t hi = r + 1 if r + 1 < n else n - 1
    return hi - lo + 1


def avgpool3_forward(const f64[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    out = np.empty((n, C, H, W), dtype=np.float64)
    cdef f64[:, :, :, ::1] y = out
    cdef Py_ssize_t i, c, r, s, a, bb
    cdef f64 acc
    with nogil:
        for i in range(n):
            for c in range(C):
                for r in range(H):
                    for s in range(W):
                        acc = 0.0
                        for a in range(r - 1, r + 2):
                            if a < 0 or a >= H:
                                continue
                            for bb in range(s - 1, s + 2):
                                if bb < 0 or bb >= W:
                                    continue
                                acc = acc + x[i, c, a, bb]
                        y[i, c, r, s] = acc / (_count(r, H) * _count(s, W))
    return out


def avgpool3_backward(const f64[:, :, :, ::1] gy):
    cdef Py_ssize_t n = gy.shape[0], C = gy.shape[1], H = gy.shape[2], W = gy.shape[3]
    out = np.zeros((n, C, H, W), dtype=np.float64)
    cdef f64[:, :, :, ::1] gx = out
    cdef Py_ssize_t i, c, r, s, a, bb
    cdef f64 g
    with nogil:
        for i in range(n):
            for c in range(C):
                for r in range(H):
                    for s in range(W):
                        g = gy[i, c, r, s] / (_count(r, H) * _count(s, W))
                        for a in range(r - 1, r + 2):
                            if a < 0 or a >= H:
                                continue
                            for bb in range(s - 1, s + 2):
                                if bb < 0 or bb >= W:
                                    continue
                                gx[i, c, a, bb] += g
    return out


def maxpool3_forward(const f64[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    out = np.empty((n, C, H, W), dtype=np.float64)
    idx = np.empty((n, C, H, W), dtype=np.int64)
    cdef f64[:, :, :, ::1] y = out
    cdef i64[:, :, :, ::1] arg = idx
    cdef Py_ssize_t i, c, r, s, kh, kw, a, bb, best_slot
    cdef f64 best, v
    with nogil:
        for i in range(n):
            for c in range(C):
                for r in range(H):
                    for s in range(W):
                        best_slot = -1
                        best = 0.0
                        for kh in range(3):
                            a = r + kh - 1
                            if a < 0 or a >= H:
                                continue
                            for kw in range(3):
                                bb = s + kw - 1
                                if bb < 0 or bb >= W:
                                    continue
                                v = x[i, c, a, bb]
                                if best_slot < 0 or v > best:
                                    best = v
                                    best_slot = kh * 3 + kw
                        y[i, c, r, s] = best
                        arg[i, c, r, s] = best_slot
    return out, idx


def maxpool3_backward(const f64[:, :, :, ::1] gy, const i64[:, :, :, ::1] argidx):
    cdef Py_ssize_t n = gy.shape[0], C = gy.shape[1], H = gy.shape[2], W = gy.shape[3]
    out = np.zeros((n, C, H, W), dtype=np.float64)
    cdef f64[:, :, :, ::1] gx = out
    cdef Py_ssize_t i, c, r, s, slot
    with nogil:
        for i in range(n):
            for c in range(C):
                for r in range(H):
                    for s in range(W):
                        slot = argidx[i, c, r, s]
                        gx[i, c, r + slot // 3 - 1, s + slot % 3 - 1] += gy[i, c, r, s]
    return out

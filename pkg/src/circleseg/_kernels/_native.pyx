# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled implementations of the hot kernels (see _numpy.py for semantics)."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d_forward(double[:, :, ::1] x, double[:, :, :, ::1] w, double[::1] b,
                   int stride, int pad):
    cdef Py_ssize_t h = x.shape[0], wi = x.shape[1], cin = x.shape[2]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], cout = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wi + 2 * pad - kw) // stride + 1
    out_arr = np.empty((ho, wo, cout), dtype=np.float64)
    cdef double[:, :, ::1] y = out_arr
    cdef Py_ssize_t oy, ox, ky, kx, ci, co, iy, ix
    cdef double xv
    with nogil:
        for oy in range(ho):
            for ox in range(wo):
                for co in range(cout):
                    y[oy, ox, co] = b[co]
                for ky in range(kh):
                    iy = oy * stride + ky - pad
                    if iy < 0 or iy >= h:
                        continue
                    for kx in range(kw):
                        ix = ox * stride + kx - pad
                        if ix < 0 or ix >= wi:
                            continue
                        for ci in range(cin):
                            xv = x[iy, ix, ci]
                            if xv == 0.0:
                                continue
                            for co in range(cout):
                                y[oy, ox, co] += xv * w[ky, kx, ci, co]
    return out_arr


def conv2d_backward(double[:, :, ::1] x, double[:, :, :, ::1] w,
                    double[:, :, ::1] gy, int stride, int pad, bint need_gx=True):
    cdef Py_ssize_t h = x.shape[0], wi = x.shape[1], cin = x.shape[2]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], cout = w.shape[3]
    cdef Py_ssize_t ho = gy.shape[0], wo = gy.shape[1]
    gw_arr = np.zeros((kh, kw, cin, cout), dtype=np.float64)
    gb_arr = np.zeros(cout, dtype=np.float64)
    gx_arr = np.zeros((h, wi, cin), dtype=np.float64) if need_gx else None
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef double[:, :, ::1] gx
    if need_gx:
        gx = gx_arr
    cdef Py_ssize_t oy, ox, ky, kx, ci, co, iy, ix
    cdef double g
    with nogil:
        for oy in range(ho):
            for ox in range(wo):
                for co in range(cout):
                    gb[co] += gy[oy, ox, co]
                for ky in range(kh):
                    iy = oy * stride + ky - pad
                    if iy < 0 or iy >= h:
                        continue
                    for kx in range(kw):
                        ix = ox * stride + kx - pad
                        if ix < 0 or ix >= wi:
                            continue
                        for ci in range(cin):
                            g = 0.0
                            for co in range(cout):
                                gw[ky, kx, ci, co] += x[iy, ix, ci] * gy[oy, ox, co]
                                g += w[ky, kx, ci, co] * gy[oy, ox, co]
                            if need_gx:
                                gx[iy, ix, ci] += g
    if not need_gx:
        return None, gw_arr, gb_arr
    return gx_arr, gw_arr, gb_arr


def circular_conv_forward(double[:, ::1] f, double[:, :, ::1] k):
    cdef Py_ssize_t n = f.shape[0], din = f.shape[1]
    cdef Py_ssize_t taps = k.shape[0], dout = k.shape[2]
    cdef Py_ssize_t r = (taps - 1) // 2
    out_arr = np.zeros((n, dout), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, d, o, src
    cdef double fv
    with nogil:
        for i in range(n):
            for j in range(taps):
                src = (i + j - r) % n
                if src < 0:
                    src += n
                for d in range(din):
                    fv = f[src, d]
                    if fv == 0.0:
                        continue
                    for o in range(dout):
                        out[i, o] += fv * k[j, d, o]
    return out_arr


def circular_conv_backward(double[:, ::1] f, double[:, :, ::1] k, double[:, ::1] gy):
    cdef Py_ssize_t n = f.shape[0], din = f.shape[1]
    cdef Py_ssize_t taps = k.shape[0], dout = k.shape[2]
    cdef Py_ssize_t r = (taps - 1) // 2
    gf_arr = np.zeros((n, din), dtype=np.float64)
    gk_arr = np.zeros((taps, din, dout), dtype=np.float64)
    cdef double[:, ::1] gf = gf_arr
    cdef double[:, :, ::1] gk = gk_arr
    cdef Py_ssize_t i, j, d, o, src
    cdef double acc, gv
    with nogil:
        for i in range(n):
            for j in range(taps):
                src = (i + j - r) % n
                if src < 0:
                    src += n
                for d in range(din):
                    acc = 0.0
                    for o in range(dout):
                        gv = gy[i, o]
                        gk[j, d, o] += f[src, d] * gv
                        acc += k[j, d, o] * gv
                    gf[src, d] += acc
    return gf_arr, gk_arr

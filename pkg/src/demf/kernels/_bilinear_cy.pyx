# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled bilinear gather/scatter kernels; same contract as ``_fallback``."""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport floor

cnp.import_array()

NAME = "cython"


cdef inline void _setup(floating u, floating v, Py_ssize_t H, Py_ssize_t W,
                        Py_ssize_t* x0, Py_ssize_t* y0,
                        floating* fx, floating* fy) noexcept nogil:
    cdef double x = u * W - 0.5
    cdef double y = v * H - 0.5
    if x < -2.0:
        x = -2.0
    elif x > W + 1.0:
        x = W + 1.0
    if y < -2.0:
        y = -2.0
    elif y > H + 1.0:
        y = H + 1.0
    cdef double xf = floor(x)
    cdef double yf = floor(y)
    x0[0] = <Py_ssize_t>xf
    y0[0] = <Py_ssize_t>yf
    fx[0] = <floating>(x - xf)
    fy[0] = <floating>(y - yf)


def _forward(floating[:, :, :, ::1] value, floating[:, :, :, ::1] loc,
             floating[:, :, :, ::1] out):
    cdef Py_ssize_t H = value.shape[0], W = value.shape[1], D = value.shape[3]
    cdef Py_ssize_t N = loc.shape[0], M = loc.shape[1], K = loc.shape[2]
    cdef Py_ssize_t n, m, k, d, c, xi, yi, x0, y0
    cdef floating fx, fy, w
    with nogil:
        for n in range(N):
            for m in range(M):
                for k in range(K):
                    _setup(loc[n, m, k, 0], loc[n, m, k, 1], H, W, &x0, &y0, &fx, &fy)
                    for c in range(4):
                        yi = y0 + c // 2
                        xi = x0 + c % 2
                        if yi < 0 or yi >= H or xi < 0 or xi >= W:
                            continue
                        w = (fx if c % 2 else 1 - fx) * (fy if c // 2 else 1 - fy)
                        for d in range(D):
                            out[n, m, k, d] += w * value[yi, xi, m, d]


def _backward(floating[:, :, :, ::1] value, floating[:, :, :, ::1] loc,
              floating[:, :, :, ::1] grad_out,
              floating[:, :, :, ::1] grad_value, floating[:, :, :, ::1] grad_loc):
    cdef Py_ssize_t H = value.shape[0], W = value.shape[1], D = value.shape[3]
    cdef Py_ssize_t N = loc.shape[0], M = loc.shape[1], K = loc.shape[2]
    cdef Py_ssize_t n, m, k, d, c, xi, yi, x0, y0
    cdef floating fx, fy, w, wx, wy, dot, g, ax, ay, dax, day
    with nogil:
        for n in range(N):
            for m in range(M):
                for k in range(K):
                    _setup(loc[n, m, k, 0], loc[n, m, k, 1], H, W, &x0, &y0, &fx, &fy)
                    for c in range(4):
                        yi = y0 + c // 2
                        xi = x0 + c % 2
                        if yi < 0 or yi >= H or xi < 0 or xi >= W:
                            continue
                        if c % 2:
                            ax = fx
                            dax = 1
                        else:
                            ax = 1 - fx
                            dax = -1
                        if c // 2:
                            ay = fy
                            day = 1
                        else:
                            ay = 1 - fy
                            day = -1
                        w = ax * ay
                        wx = dax * ay
                        wy = ax * day
                        dot = 0
                        for d in range(D):
                            g = grad_out[n, m, k, d]
                            grad_value[yi, xi, m, d] += w * g
                            dot = dot + value[yi, xi, m, d] * g
                        grad_loc[n, m, k, 0] += dot * wx * W
                        grad_loc[n, m, k, 1] += dot * wy * H


def sample_forward(value, loc):
    value = np.ascontiguousarray(value)
    loc = np.ascontiguousarray(loc, dtype=value.dtype)
    out = np.zeros(loc.shape[:3] + (value.shape[3],), dtype=value.dtype)
    _forward(value, loc, out)
    return out


def sample_backward(value, loc, grad_out):
    value = np.ascontiguousarray(value)
    loc = np.ascontiguousarray(loc, dtype=value.dtype)
    grad_out = np.ascontiguousarray(grad_out, dtype=value.dtype)
    grad_value = np.zeros_like(value)
    grad_loc = np.zeros(loc.shape, dtype=value.dtype)
    _backward(value, loc, grad_out, grad_value, grad_loc)
    return grad_value, grad_loc

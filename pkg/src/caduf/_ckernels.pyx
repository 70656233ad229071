# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: bilinear gather/scatter and per-pixel dynamic filtering.

Semantics mirror ``caduf._pykernels`` exactly; see that module for the
reference formulation. All arrays are C-contiguous float64.
"""
import numpy as np

from libc.math cimport floor


cdef inline void _cell(double p, Py_ssize_t n, Py_ssize_t* i0, Py_ssize_t* i1,
                       double* f, double* inside) noexcept nogil:
    inside[0] = 1.0 if (p >= 0.0 and p <= n - 1) else 0.0
    if p < 0.0:
        p = 0.0
    elif p > n - 1:
        p = n - 1
    cdef Py_ssize_t a = <Py_ssize_t>floor(p)
    if a > n - 2:
        a = n - 2
    if a < 0:
        a = 0
    i0[0] = a
    i1[0] = a + 1 if n > 1 else 0
    f[0] = p - a


def bilinear_gather(double[:, :, :, ::1] inp, double[:, :, :, ::1] py,
                    double[:, :, :, ::1] px):
    cdef Py_ssize_t N = inp.shape[0], C = inp.shape[1], H = inp.shape[2], W = inp.shape[3]
    cdef Py_ssize_t K = py.shape[1], Ho = py.shape[2], Wo = py.shape[3]
    out_arr = np.empty((N, C, K, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, k, i, j, y0, y1, x0, x1
    cdef double fy, fx, iny, inx
    with nogil:
        for n in range(N):
            for k in range(K):
                for i in range(Ho):
                    for j in range(Wo):
                        _cell(py[n, k, i, j], H, &y0, &y1, &fy, &iny)
                        _cell(px[n, k, i, j], W, &x0, &x1, &fx, &inx)
                        for c in range(C):
                            out[n, c, k, i, j] = (
                                (1.0 - fy) * ((1.0 - fx) * inp[n, c, y0, x0] + fx * inp[n, c, y0, x1])
                                + fy * ((1.0 - fx) * inp[n, c, y1, x0] + fx * inp[n, c, y1, x1])
                            )
    return out_arr


def bilinear_scatter(double[:, :, :, :, ::1] grad, double[:, :, :, ::1] inp,
                     double[:, :, :, ::1] py, double[:, :, :, ::1] px):
    cdef Py_ssize_t N = inp.shape[0], C = inp.shape[1], H = inp.shape[2], W = inp.shape[3]
    cdef Py_ssize_t K = py.shape[1], Ho = py.shape[2], Wo = py.shape[3]
    gin_arr = np.zeros((N, C, H, W), dtype=np.float64)
    gpy_arr = np.zeros((N, K, Ho, Wo), dtype=np.float64)
    gpx_arr = np.zeros((N, K, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] gin = gin_arr
    cdef double[:, :, :, ::1] gpy = gpy_arr
    cdef double[:, :, :, ::1] gpx = gpx_arr
    cdef Py_ssize_t n, c, k, i, j, y0, y1, x0, x1
    cdef double fy, fx, iny, inx, g, v00, v01, v10, v11, ay, ax
    with nogil:
        for n in range(N):
            for k in range(K):
                for i in range(Ho):
                    for j in range(Wo):
                        _cell(py[n, k, i, j], H, &y0, &y1, &fy, &iny)
                        _cell(px[n, k, i, j], W, &x0, &x1, &fx, &inx)
                        ay = 0.0
                        ax = 0.0
                        for c in range(C):
                            g = grad[n, c, k, i, j]
                            gin[n, c, y0, x0] += g * (1.0 - fy) * (1.0 - fx)
                            gin[n, c, y0, x1] += g * (1.0 - fy) * fx
                            gin[n, c, y1, x0] += g * fy * (1.0 - fx)
                            gin[n, c, y1, x1] += g * fy * fx
                            v00 = inp[n, c, y0, x0]
                            v01 = inp[n, c, y0, x1]
                            v10 = inp[n, c, y1, x0]
                            v11 = inp[n, c, y1, x1]
                            ay += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01))
                            ax += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))
                        gpy[n, k, i, j] = ay * iny
                        gpx[n, k, i, j] = ax * inx
    return gin_arr, gpy_arr, gpx_arr


cdef inline Py_ssize_t _clamp(Py_ssize_t v, Py_ssize_t n) noexcept nogil:
    if v < 0:
        return 0
    if v > n - 1:
        return n - 1
    return v


def dynamic_filter_forward(double[:, :, :, ::1] z, double[:, :, :, ::1] c, int p, int s):
    cdef Py_ssize_t N = z.shape[0], C = z.shape[1], h = z.shape[2], w = z.shape[3]
    cdef Py_ssize_t H = c.shape[2], W = c.shape[3]
    cdef Py_ssize_t side = 2 * p + 1
    out_arr = np.zeros((N, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, ch, i, j, l, m, t, yy, xx, ci, cj
    cdef double coef
    with nogil:
        for n in range(N):
            for i in range(H):
                ci = i // s
                for j in range(W):
                    cj = j // s
                    for l in range(side):
                        yy = _clamp(ci + l - p, h)
                        for m in range(side):
                            xx = _clamp(cj + m - p, w)
                            coef = c[n, l * side + m, i, j]
                            for ch in range(C):
                                out[n, ch, i, j] += coef * z[n, ch, yy, xx]
    return out_arr


def dynamic_filter_backward(double[:, :, :, ::1] g, double[:, :, :, ::1] z,
                            double[:, :, :, ::1] c, int p, int s):
    cdef Py_ssize_t N = z.shape[0], C = z.shape[1], h = z.shape[2], w = z.shape[3]
    cdef Py_ssize_t H = c.shape[2], W = c.shape[3]
    cdef Py_ssize_t side = 2 * p + 1
    gz_arr = np.zeros((N, C, h, w), dtype=np.float64)
    gc_arr = np.zeros((N, side * side, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] gz = gz_arr
    cdef double[:, :, :, ::1] gc = gc_arr
    cdef Py_ssize_t n, ch, i, j, l, m, t, yy, xx, ci, cj
    cdef double coef, acc
    with nogil:
        for n in range(N):
            for i in range(H):
                ci = i // s
                for j in range(W):
                    cj = j // s
                    for l in range(side):
                        yy = _clamp(ci + l - p, h)
                        for m in range(side):
                            xx = _clamp(cj + m - p, w)
                            t = l * side + m
                            coef = c[n, t, i, j]
                            acc = 0.0
                            for ch in range(C):
                                acc += g[n, ch, i, j] * z[n, ch, yy, xx]
                                gz[n, ch, yy, xx] += coef * g[n, ch, i, j]
                            gc[n, t, i, j] = acc
    return gz_arr, gc_arr

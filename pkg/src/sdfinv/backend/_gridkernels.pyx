# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused bilinear grid gather/scatter kernels (compiled backend).

Same contract as sdfinv.backend.numpy_kernels; see that module for the
coordinate and border-mode semantics.
"""

import numpy as np

cimport cython
from libc.math cimport floor


ctypedef fused floating:
    float
    double


cdef inline void _corner(floating u, floating v, Py_ssize_t H, Py_ssize_t W,
                         bint zero_outside,
                         Py_ssize_t* xi, Py_ssize_t* yi,
                         floating* ax, floating* ay,
                         floating* dax, floating* day) noexcept nogil:
    cdef floating sx = <floating> (0.5 * (W - 1))
    cdef floating sy = <floating> (0.5 * (H - 1))
    cdef floating gx = (u + 1) * sx
    cdef floating gy = (v + 1) * sy
    cdef floating fx, fy, vx0, vx1, vy0, vy1, mx, my
    cdef Py_ssize_t x0, y0

    if zero_outside:
        x0 = <Py_ssize_t> floor(gx)
        y0 = <Py_ssize_t> floor(gy)
        fx = gx - <floating> x0
        fy = gy - <floating> y0
        vx0 = 1 if (x0 >= 0 and x0 <= W - 1) else 0
        vx1 = 1 if (x0 + 1 >= 0 and x0 + 1 <= W - 1) else 0
        vy0 = 1 if (y0 >= 0 and y0 <= H - 1) else 0
        vy1 = 1 if (y0 + 1 >= 0 and y0 + 1 <= H - 1) else 0
        mx = 1
        my = 1
    else:
        if gx < 0:
            gx = 0
        if gx > W - 1:
            gx = <floating> (W - 1)
        if gy < 0:
            gy = 0
        if gy > H - 1:
            gy = <floating> (H - 1)
        x0 = <Py_ssize_t> floor(gx)
        if x0 > W - 2:
            x0 = W - 2
        y0 = <Py_ssize_t> floor(gy)
        if y0 > H - 2:
            y0 = H - 2
        fx = gx - <floating> x0
        fy = gy - <floating> y0
        vx0 = vx1 = vy0 = vy1 = 1
        mx = 1 if (u >= -1 and u <= 1) else 0
        my = 1 if (v >= -1 and v <= 1) else 0

    xi[0] = min(max(x0, 0), W - 1)
    xi[1] = min(max(x0 + 1, 0), W - 1)
    yi[0] = min(max(y0, 0), H - 1)
    yi[1] = min(max(y0 + 1, 0), H - 1)
    ax[0] = (1 - fx) * vx0
    ax[1] = fx * vx1
    ay[0] = (1 - fy) * vy0
    ay[1] = fy * vy1
    dax[0] = -sx * mx * vx0
    dax[1] = sx * mx * vx1
    day[0] = -sy * my * vy0
    day[1] = sy * my * vy1


def gather(floating[:, :, ::1] grid, floating[:, ::1] uv, bint zero_outside,
           floating[:, ::1] out):
    cdef Py_ssize_t C = grid.shape[0], H = grid.shape[1], W = grid.shape[2]
    cdef Py_ssize_t N = uv.shape[0]
    cdef Py_ssize_t n, c, i, j
    cdef Py_ssize_t xi[2]
    cdef Py_ssize_t yi[2]
    cdef floating ax[2]
    cdef floating ay[2]
    cdef floating dax[2]
    cdef floating day[2]
    cdef floating acc
    with nogil:
        for n in range(N):
            _corner(uv[n, 0], uv[n, 1], H, W, zero_outside, xi, yi, ax, ay, dax, day)
            for c in range(C):
                acc = 0
                for j in range(2):
                    for i in range(2):
                        acc += ay[j] * ax[i] * grid[c, yi[j], xi[i]]
                out[n, c] = acc


def gather_duv(floating[:, :, ::1] grid, floating[:, ::1] uv, bint zero_outside,
               floating[:, :, ::1] duv):
    cdef Py_ssize_t C = grid.shape[0], H = grid.shape[1], W = grid.shape[2]
    cdef Py_ssize_t N = uv.shape[0]
    cdef Py_ssize_t n, c, i, j
    cdef Py_ssize_t xi[2]
    cdef Py_ssize_t yi[2]
    cdef floating ax[2]
    cdef floating ay[2]
    cdef floating dax[2]
    cdef floating day[2]
    cdef floating du, dv, g
    with nogil:
        for n in range(N):
            _corner(uv[n, 0], uv[n, 1], H, W, zero_outside, xi, yi, ax, ay, dax, day)
            for c in range(C):
                du = 0
                dv = 0
                for j in range(2):
                    for i in range(2):
                        g = grid[c, yi[j], xi[i]]
                        du += ay[j] * dax[i] * g
                        dv += day[j] * ax[i] * g
                duv[n, c, 0] = du
                duv[n, c, 1] = dv


def gather_bwd(floating[:, :, ::1] grid, floating[:, ::1] uv, bint zero_outside,
               floating[:, ::1] gout,
               floating[:, :, ::1] ggrid, floating[:, ::1] guv):
    cdef Py_ssize_t C = grid.shape[0], H = grid.shape[1], W = grid.shape[2]
    cdef Py_ssize_t N = uv.shape[0]
    cdef Py_ssize_t n, c, i, j
    cdef Py_ssize_t xi[2]
    cdef Py_ssize_t yi[2]
    cdef floating ax[2]
    cdef floating ay[2]
    cdef floating dax[2]
    cdef floating day[2]
    cdef floating go, gu, gv
    with nogil:
        for n in range(N):
            _corner(uv[n, 0], uv[n, 1], H, W, zero_outside, xi, yi, ax, ay, dax, day)
            gu = 0
            gv = 0
            for c in range(C):
                go = gout[n, c]
                for j in range(2):
                    for i in range(2):
                        ggrid[c, yi[j], xi[i]] += ay[j] * ax[i] * go
                        gu += ay[j] * dax[i] * grid[c, yi[j], xi[i]] * go
                        gv += day[j] * ax[i] * grid[c, yi[j], xi[i]] * go
            guv[n, 0] += gu
            guv[n, 1] += gv


def gather_duv_bwd(floating[:, :, ::1] grid, floating[:, ::1] uv, bint zero_outside,
                   floating[:, :, ::1] gduv,
                   floating[:, :, ::1] ggrid, floating[:, ::1] guv):
    cdef Py_ssize_t C = grid.shape[0], H = grid.shape[1], W = grid.shape[2]
    cdef Py_ssize_t N = uv.shape[0]
    cdef Py_ssize_t n, c, i, j
    cdef Py_ssize_t xi[2]
    cdef Py_ssize_t yi[2]
    cdef floating ax[2]
    cdef floating ay[2]
    cdef floating dax[2]
    cdef floating day[2]
    cdef floating gdu, gdv, cross, gu, gv
    with nogil:
        for n in range(N):
            _corner(uv[n, 0], uv[n, 1], H, W, zero_outside, xi, yi, ax, ay, dax, day)
            gu = 0
            gv = 0
            for c in range(C):
                gdu = gduv[n, c, 0]
                gdv = gduv[n, c, 1]
                for j in range(2):
                    for i in range(2):
                        ggrid[c, yi[j], xi[i]] += ay[j] * dax[i] * gdu + day[j] * ax[i] * gdv
                        cross = day[j] * dax[i] * grid[c, yi[j], xi[i]]
                        gv += gdu * cross
                        gu += gdv * cross
            guv[n, 0] += gu
            guv[n, 1] += gv

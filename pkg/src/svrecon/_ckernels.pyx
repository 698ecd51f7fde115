# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled trilinear gather/scatter kernels.

Same contract as :mod:`svrecon._kernels_py`: zero padding outside the grid,
each of the eight corners is kept or dropped independently, and a sample is
flagged in-bounds when it lies inside ``[0, n-1]`` on every axis.
"""
from libc.math cimport floor, isfinite

import numpy as np


cdef inline bint _inside(double x, Py_ssize_t n) noexcept nogil:
    return x >= 0.0 and x <= <double>(n - 1)


def pull(const double[:, :, ::1] vol, const double[:, ::1] coords):
    cdef Py_ssize_t m = coords.shape[0]
    cdef Py_ssize_t nx = vol.shape[0], ny = vol.shape[1], nz = vol.shape[2]
    out_arr = np.zeros(m, dtype=np.float64)
    inb_arr = np.zeros(m, dtype=np.bool_)
    cdef double[::1] out = out_arr
    cdef unsigned char[::1] inb = inb_arr.view(np.uint8)
    cdef Py_ssize_t k, i, j, l, a, b, c
    cdef double x, y, z, fx, fy, fz, wx, wy, wz, acc
    with nogil:
        for k in range(m):
            x = coords[k, 0]
            y = coords[k, 1]
            z = coords[k, 2]
            if not (isfinite(x) and isfinite(y) and isfinite(z)):
                continue
            if _inside(x, nx) and _inside(y, ny) and _inside(z, nz):
                inb[k] = 1
            i = <Py_ssize_t>floor(x)
            j = <Py_ssize_t>floor(y)
            l = <Py_ssize_t>floor(z)
            if i < -1 or j < -1 or l < -1 or i >= nx or j >= ny or l >= nz:
                continue
            fx = x - i
            fy = y - j
            fz = z - l
            acc = 0.0
            for a in range(2):
                if i + a < 0 or i + a >= nx:
                    continue
                wx = fx if a else 1.0 - fx
                for b in range(2):
                    if j + b < 0 or j + b >= ny:
                        continue
                    wy = fy if b else 1.0 - fy
                    for c in range(2):
                        if l + c < 0 or l + c >= nz:
                            continue
                        wz = fz if c else 1.0 - fz
                        acc = acc + wx * wy * wz * vol[i + a, j + b, l + c]
            out[k] = acc
    return out_arr, inb_arr


def push(double[:, :, ::1] data, weight, const double[:, ::1] coords,
         const double[::1] values, const double[::1] wvals):
    """Scatter ``values`` into ``data`` (and ``wvals`` into ``weight``).

    Returns the number of samples lying outside the grid bounds.
    """
    cdef Py_ssize_t m = coords.shape[0]
    cdef Py_ssize_t nx = data.shape[0], ny = data.shape[1], nz = data.shape[2]
    cdef double[:, :, ::1] wgt
    cdef bint has_w = weight is not None
    if has_w:
        wgt = weight
    else:
        wgt = data
    cdef Py_ssize_t k, i, j, l, a, b, c, dropped = 0
    cdef double x, y, z, fx, fy, fz, wx, wy, wz, w, v, u
    with nogil:
        for k in range(m):
            x = coords[k, 0]
            y = coords[k, 1]
            z = coords[k, 2]
            if not (isfinite(x) and isfinite(y) and isfinite(z)):
                dropped += 1
                continue
            if not (_inside(x, nx) and _inside(y, ny) and _inside(z, nz)):
                dropped += 1
            i = <Py_ssize_t>floor(x)
            j = <Py_ssize_t>floor(y)
            l = <Py_ssize_t>floor(z)
            if i < -1 or j < -1 or l < -1 or i >= nx or j >= ny or l >= nz:
                continue
            fx = x - i
            fy = y - j
            fz = z - l
            v = values[k]
            u = wvals[k]
            for a in range(2):
                if i + a < 0 or i + a >= nx:
                    continue
                wx = fx if a else 1.0 - fx
                for b in range(2):
                    if j + b < 0 or j + b >= ny:
                        continue
                    wy = fy if b else 1.0 - fy
                    for c in range(2):
                        if l + c < 0 or l + c >= nz:
                            continue
                        wz = fz if c else 1.0 - fz
                        w = wx * wy * wz
                        data[i + a, j + b, l + c] += w * v
                        if has_w:
                            wgt[i + a, j + b, l + c] += w * u
    return dropped

# cython: language_level=3
"""Compiled hot kernels.

Mirrors pgfusion._kernels_np function-for-function; the NumPy module is the
semantic reference and the parity tests hold both sides together.  Scatter
reductions accumulate strictly in point-index order so sums are bit-identical
to the sequential NumPy versions; max reductions are order-independent.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

IS_COMPILED = True


def conv2d_fwd(double[:, :, ::1] x, double[:, :, :, ::1] w, b,
               int stride, int dilation, int pad):
    cdef Py_ssize_t in_ch = x.shape[0], height = x.shape[1], width = x.shape[2]
    cdef Py_ssize_t out_ch = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t out_h = (height + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    cdef Py_ssize_t out_w = (width + 2 * pad - dilation * (kw - 1) - 1) // stride + 1

    xp_arr = np.zeros((in_ch, height + 2 * pad, width + 2 * pad), dtype=np.float64)
    xp_arr[:, pad:pad + height, pad:pad + width] = np.asarray(x)
    cdef double[:, :, ::1] xp = xp_arr

    out_arr = np.zeros((out_ch, out_h, out_w), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[::1] bv
    cdef bint has_b = b is not None

    cdef Py_ssize_t o, i, ky, kx, oy, ox, ys, xs
    cdef double wv, bval

    if has_b:
        bv = b
        for o in range(out_ch):
            bval = bv[o]
            for oy in range(out_h):
                for ox in range(out_w):
                    out[o, oy, ox] = bval

    for o in range(out_ch):
        for i in range(in_ch):
            for ky in range(kh):
                for kx in range(kw):
                    wv = w[o, i, ky, kx]
                    if wv == 0.0:
                        continue
                    for oy in range(out_h):
                        ys = oy * stride + ky * dilation
                        xs = kx * dilation
                        if stride == 1:
                            for ox in range(out_w):
                                out[o, oy, ox] += wv * xp[i, ys, xs + ox]
                        else:
                            for ox in range(out_w):
                                out[o, oy, ox] += wv * xp[i, ys, xs + ox * stride]
    return out_arr


def conv_transpose2d_x2_fwd(double[:, :, ::1] x, double[:, :, :, ::1] w, b):
    cdef Py_ssize_t in_ch = x.shape[0], height = x.shape[1], width = x.shape[2]
    cdef Py_ssize_t out_ch = w.shape[0]
    out_arr = np.zeros((out_ch, 2 * height, 2 * width), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[::1] bv
    cdef bint has_b = b is not None
    cdef Py_ssize_t o, i, ky, kx, iy, ix, iy0, ix0, oy, ox
    cdef double wv, bval

    for o in range(out_ch):
        for i in range(in_ch):
            for ky in range(3):
                # the only out-of-range scatters are tap index 0 from row/col 0
                iy0 = 1 if ky == 0 else 0
                for kx in range(3):
                    wv = w[o, i, ky, kx]
                    if wv == 0.0:
                        continue
                    ix0 = 1 if kx == 0 else 0
                    for iy in range(iy0, height):
                        oy = 2 * iy + ky - 1
                        for ix in range(ix0, width):
                            ox = 2 * ix + kx - 1
                            out[o, oy, ox] += wv * x[i, iy, ix]
    if has_b:
        bv = b
        for o in range(out_ch):
            bval = bv[o]
            for oy in range(2 * height):
                for ox in range(2 * width):
                    out[o, oy, ox] += bval
    return out_arr


def maxpool2d_fwd(double[:, :, ::1] x, int k, int stride):
    cdef Py_ssize_t ch = x.shape[0], height = x.shape[1], width = x.shape[2]
    cdef Py_ssize_t out_h = (height - k) // stride + 1
    cdef Py_ssize_t out_w = (width - k) // stride + 1
    out_arr = np.empty((ch, out_h, out_w), dtype=np.float64)
    arg_arr = np.empty((ch, out_h, out_w), dtype=np.int64)
    cdef double[:, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, ::1] arg = arg_arr
    cdef Py_ssize_t c, oy, ox, wy, wx, iy, ix, best_iy, best_ix
    cdef double best, v

    for c in range(ch):
        for oy in range(out_h):
            for ox in range(out_w):
                # seed with the first window element so an all-equal window
                # (even all -inf) reports its first position, like argmax
                best_iy = oy * stride
                best_ix = ox * stride
                best = x[c, best_iy, best_ix]
                for wy in range(k):
                    iy = oy * stride + wy
                    for wx in range(k):
                        ix = ox * stride + wx
                        v = x[c, iy, ix]
                        if v > best:
                            best = v
                            best_iy = iy
                            best_ix = ix
                out[c, oy, ox] = best
                arg[c, oy, ox] = best_iy * width + best_ix
    return out_arr, arg_arr


def rv_assign(cnp.int64_t[::1] rows, cnp.int64_t[::1] cols, double[::1] ranges,
              int height, int width):
    cdef Py_ssize_t n = rows.shape[0]
    pop_arr = np.full((height, width), -1, dtype=np.int32)
    cdef cnp.int32_t[:, ::1] pop = pop_arr
    cdef Py_ssize_t p
    cdef cnp.int32_t cur
    for p in range(n):
        cur = pop[rows[p], cols[p]]
        # nearest point wins, equal ranges keep the earliest index
        if cur < 0 or ranges[p] < ranges[cur]:
            pop[rows[p], cols[p]] = <cnp.int32_t> p
    return pop_arr


def scatter_pillar(cnp.int64_t[::1] iy, cnp.int64_t[::1] ix,
                   double[::1] z, double[::1] intensity, int rows, int cols):
    cdef Py_ssize_t n = iy.shape[0]
    out_arr = np.zeros((4, rows, cols), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t p, r, c
    for p in range(n):
        r = iy[p]
        c = ix[p]
        if out[0, r, c] == 0.0 or z[p] > out[2, r, c]:
            out[2, r, c] = z[p]
        out[0, r, c] += 1.0
        out[1, r, c] += z[p]
        out[3, r, c] += intensity[p]
    return out_arr


def scatter_max(double[:, ::1] vals, cnp.int64_t[::1] iy, cnp.int64_t[::1] ix,
                int rows, int cols):
    cdef Py_ssize_t ch = vals.shape[0], n = vals.shape[1]
    out_arr = np.zeros((ch, rows, cols), dtype=np.float64)
    touched_arr = np.zeros((rows, cols), dtype=np.uint8)
    cdef double[:, :, ::1] out = out_arr
    cdef cnp.uint8_t[:, ::1] touched = touched_arr
    cdef Py_ssize_t p, c, r, cc
    for p in range(n):
        r = iy[p]
        cc = ix[p]
        if touched[r, cc]:
            for c in range(ch):
                if vals[c, p] > out[c, r, cc]:
                    out[c, r, cc] = vals[c, p]
        else:
            touched[r, cc] = 1
            for c in range(ch):
                out[c, r, cc] = vals[c, p]
    return out_arr


def scatter_sum_count(double[:, ::1] vals, cnp.int64_t[::1] iy, cnp.int64_t[::1] ix,
                      int rows, int cols):
    cdef Py_ssize_t ch = vals.shape[0], n = vals.shape[1]
    sums_arr = np.zeros((ch, rows, cols), dtype=np.float64)
    counts_arr = np.zeros((rows, cols), dtype=np.int64)
    cdef double[:, :, ::1] sums = sums_arr
    cdef cnp.int64_t[:, ::1] counts = counts_arr
    cdef Py_ssize_t p, c, r, cc
    for p in range(n):
        r = iy[p]
        cc = ix[p]
        counts[r, cc] += 1
        for c in range(ch):
            sums[c, r, cc] += vals[c, p]
    return sums_arr, counts_arr


def count_cells(cnp.int64_t[::1] iy, cnp.int64_t[::1] ix, int rows, int cols):
    cdef Py_ssize_t n = iy.shape[0]
    counts_arr = np.zeros((rows, cols), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] counts = counts_arr
    cdef Py_ssize_t p
    for p in range(n):
        counts[iy[p], ix[p]] += 1
    return counts_arr

"""NumPy implementations of the hot kernels.

This module is the import-time fallback used when the compiled extension
(``pgfusion._kernels``) is unavailable, and the semantic reference the
extension is tested against.  Every function here is deterministic: scatter
reductions either use order-independent operations (max, integer counts) or
accumulate strictly in point-index order (``np.add.at`` / ``np.bincount``
are unbuffered and sequential), so results never depend on thread count or
call order.

Array conventions: feature maps are C-contiguous float64 ``(C, H, W)``;
convolution weights are ``(out_ch, in_ch, kh, kw)``; scatter index arrays
are int64 and must already be in range for the target grid.
"""

import numpy as np

IS_COMPILED = False


def conv2d_fwd(x, w, b, stride, dilation, pad):
    """Dense 2D convolution, float64, zero padding.

    Accumulates one kernel tap at a time in fixed (ky, kx) order; the
    per-tap contraction over input channels is a BLAS call.
    """
    in_ch, height, width = x.shape
    out_ch, _, kh, kw = w.shape
    out_h = (height + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    out_w = (width + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    xp = x
    if pad > 0:
        xp = np.zeros((in_ch, height + 2 * pad, width + 2 * pad), dtype=np.float64)
        xp[:, pad : pad + height, pad : pad + width] = x
    out = np.zeros((out_ch, out_h, out_w), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            ys = ky * dilation
            xs = kx * dilation
            patch = xp[
                :,
                ys : ys + (out_h - 1) * stride + 1 : stride,
                xs : xs + (out_w - 1) * stride + 1 : stride,
            ]
            out += np.tensordot(w[:, :, ky, kx], patch, axes=1)
    if b is not None:
        out += b[:, None, None]
    return out


def conv_transpose2d_x2_fwd(x, w, b):
    """Transposed convolution tuned to the exact-doubling case.

    3x3 kernel, stride 2; output is exactly (2H, 2W).  Equivalent to the
    standard transposed convolution with padding 1 and output padding 1:
    input pixel (iy, ix) scatters tap (ky, kx) to (2*iy + ky - 1, 2*ix + kx - 1),
    out-of-range taps dropped.
    """
    in_ch, height, width = x.shape
    out_ch = w.shape[0]
    buf = np.zeros((out_ch, 2 * height + 2, 2 * width + 2), dtype=np.float64)
    for ky in range(3):
        for kx in range(3):
            buf[:, ky : ky + 2 * height : 2, kx : kx + 2 * width : 2] += np.tensordot(
                w[:, :, ky, kx], x, axes=1
            )
    out = np.ascontiguousarray(buf[:, 1 : 1 + 2 * height, 1 : 1 + 2 * width])
    if b is not None:
        out += b[:, None, None]
    return out


def maxpool2d_fwd(x, k, stride):
    """Windowed max with per-window argmax.

    Returns (out, arg) where arg holds the flat spatial index (iy * W + ix)
    of the first maximal element of each window in row-major window order.
    """
    ch, height, width = x.shape
    out_h = (height - k) // stride + 1
    out_w = (width - k) // stride + 1
    s0, s1, s2 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(ch, out_h, out_w, k, k),
        strides=(s0, s1 * stride, s2 * stride, s1, s2),
    )
    flat = windows.reshape(ch, out_h, out_w, k * k)
    loc = np.argmax(flat, axis=3)
    out = np.take_along_axis(flat, loc[..., None], axis=3)[..., 0]
    oy = np.arange(out_h, dtype=np.int64)[:, None] * stride
    ox = np.arange(out_w, dtype=np.int64)[None, :] * stride
    arg = (oy + loc // k) * width + (ox + loc % k)
    return np.ascontiguousarray(out), np.ascontiguousarray(arg)


def rv_assign(rows, cols, ranges, height, width):
    """Resolve range-image pixel ownership: nearest point wins, ties to the
    lowest point index.  Returns int32 (H, W) point indices, -1 for empty."""
    n = rows.shape[0]
    pop = np.full((height, width), -1, dtype=np.int32)
    if n == 0:
        return pop
    flat = rows * np.int64(width) + cols
    idx = np.arange(n, dtype=np.int64)
    order = np.lexsort((idx, ranges, flat))
    first = np.unique(flat[order], return_index=True)[1]
    winners = order[first]
    pop.reshape(-1)[flat[winners]] = winners.astype(np.int32)
    return pop


def scatter_pillar(iy, ix, z, intensity, rows, cols):
    """Per-cell point statistics: count, sum z, max z (0 if empty), sum intensity."""
    flat = iy * np.int64(cols) + ix
    ncell = rows * cols
    count = np.bincount(flat, minlength=ncell).astype(np.float64)
    sum_z = np.bincount(flat, weights=z, minlength=ncell)
    sum_i = np.bincount(flat, weights=intensity, minlength=ncell)
    max_z = np.full(ncell, -np.inf, dtype=np.float64)
    np.maximum.at(max_z, flat, z)
    max_z[count == 0] = 0.0
    out = np.stack([count, sum_z, max_z, sum_i])
    return out.reshape(4, rows, cols)


def scatter_max(vals, iy, ix, rows, cols):
    """Per-channel max-scatter of point features into a grid; empty cells 0."""
    ch, n = vals.shape
    flat = iy * np.int64(cols) + ix
    out = np.full((ch, rows * cols), -np.inf, dtype=np.float64)
    np.maximum.at(out, (np.arange(ch, dtype=np.int64)[:, None], flat[None, :]), vals)
    touched = np.zeros(rows * cols, dtype=bool)
    touched[flat] = True
    out[:, ~touched] = 0.0
    return out.reshape(ch, rows, cols)


def scatter_sum_count(vals, iy, ix, rows, cols):
    """Per-channel sum-scatter plus cell counts, accumulated in point order."""
    ch, n = vals.shape
    flat = iy * np.int64(cols) + ix
    ncell = rows * cols
    sums = np.empty((ch, ncell), dtype=np.float64)
    for c in range(ch):
        sums[c] = np.bincount(flat, weights=vals[c], minlength=ncell)
    counts = np.bincount(flat, minlength=ncell)
    return sums.reshape(ch, rows, cols), counts.reshape(rows, cols)


def count_cells(iy, ix, rows, cols):
    """Number of points falling into each grid cell."""
    flat = iy * np.int64(cols) + ix
    return np.bincount(flat, minlength=rows * cols).reshape(rows, cols)

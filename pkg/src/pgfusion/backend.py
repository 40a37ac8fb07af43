"""Kernel backend selection.

The hot kernels exist twice: a Cython extension (``pgfusion._kernels``) and
a NumPy fallback (``pgfusion._kernels_np``) with identical signatures and
semantics.  The compiled backend is preferred when importable; set the
environment variable ``PGFUSION_BACKEND`` to ``compiled`` or ``python`` to
force one side (``compiled`` raises if the extension is missing, so CI can
assert the build actually happened).

All public wrappers normalize dtypes and layout before dispatch so both
backends see C-contiguous float64 / int64 inputs.
"""

import os
import warnings

import numpy as np

from pgfusion import _kernels_np

_FORCED = os.environ.get("PGFUSION_BACKEND", "").strip().lower()
if _FORCED not in ("", "compiled", "python"):
    raise RuntimeError(
        "PGFUSION_BACKEND must be 'compiled', 'python' or unset, got %r" % _FORCED
    )

if _FORCED == "python":
    _impl = _kernels_np
else:
    try:
        from pgfusion import _kernels as _impl
    except ImportError:
        if _FORCED == "compiled":
            raise RuntimeError(
                "PGFUSION_BACKEND=compiled but the extension is not built; "
                "reinstall with a working C toolchain"
            )
        warnings.warn(
            "pgfusion compiled kernels unavailable, using the NumPy fallback; "
            "expect slower pipeline runs",
            RuntimeWarning,
            stacklevel=2,
        )
        _impl = _kernels_np

COMPILED = bool(getattr(_impl, "IS_COMPILED", False))
BACKEND_NAME = "compiled" if COMPILED else "python"


def backend_module(name=None):
    """Return a kernel module by name ('compiled' / 'python'), or the active one.

    Used by the parity tests and the benchmark; raises ImportError if the
    compiled module is requested but absent.
    """
    if name is None:
        return _impl
    if name == "python":
        return _kernels_np
    if name == "compiled":
        from pgfusion import _kernels

        return _kernels
    raise ValueError("unknown backend %r" % name)


def _as_f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _as_i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def conv2d_fwd(x, w, b, stride=1, dilation=1, pad=0):
    x = _as_f64(x)
    w = _as_f64(w)
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0]:
        raise ValueError("conv2d_fwd: x must be (C,H,W), w (O,C,kh,kw)")
    b = None if b is None else _as_f64(b)
    return _impl.conv2d_fwd(x, w, b, int(stride), int(dilation), int(pad))


def conv_transpose2d_x2_fwd(x, w, b):
    x = _as_f64(x)
    w = _as_f64(w)
    if w.shape[2:] != (3, 3) or w.shape[1] != x.shape[0]:
        raise ValueError("conv_transpose2d_x2_fwd: w must be (O,C,3,3)")
    b = None if b is None else _as_f64(b)
    return _impl.conv_transpose2d_x2_fwd(x, w, b)


def maxpool2d_fwd(x, k, stride):
    x = _as_f64(x)
    k = int(k)
    stride = int(stride)
    if x.shape[1] < k or x.shape[2] < k:
        raise ValueError("maxpool2d_fwd: window larger than input")
    return _impl.maxpool2d_fwd(x, k, stride)


def rv_assign(rows, cols, ranges, height, width):
    return _impl.rv_assign(
        _as_i64(rows), _as_i64(cols), _as_f64(ranges), int(height), int(width)
    )


def scatter_pillar(iy, ix, z, intensity, rows, cols):
    return _impl.scatter_pillar(
        _as_i64(iy), _as_i64(ix), _as_f64(z), _as_f64(intensity), int(rows), int(cols)
    )


def scatter_max(vals, iy, ix, rows, cols):
    return _impl.scatter_max(_as_f64(vals), _as_i64(iy), _as_i64(ix), int(rows), int(cols))


def scatter_sum_count(vals, iy, ix, rows, cols):
    return _impl.scatter_sum_count(
        _as_f64(vals), _as_i64(iy), _as_i64(ix), int(rows), int(cols)
    )


def count_cells(iy, ix, rows, cols):
    return _impl.count_cells(_as_i64(iy), _as_i64(ix), int(rows), int(cols))

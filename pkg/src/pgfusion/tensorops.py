"""Dense tensor operations on (C, H, W) float64 arrays.

This is the numeric substrate for the fusion, guidance and detection code:
convolutions, pooling, block reshuffles, a two-layer MLP and elementwise
activations, plus analytic input-gradients for the supervised subset and a
central-difference gradient checker.

Conventions
-----------
* A feature map is a C-contiguous float64 ndarray of shape (channels, H, W).
* Every operation validates that its result is finite and returns a fresh
  array; nothing mutates its inputs, so calls are safe from any thread.
* Gradient support is deliberately narrow: only ops on the supervised path
  (convolution, MLP, activations, pooling, elementwise mul/add and the loss
  functions in :mod:`pgfusion.detection`) implement ``backward``.  The
  upsampling / reshuffle ops are forward-only since no training loop exists.
"""

import math
from dataclasses import dataclass

import numpy as np

from pgfusion import backend


def check_finite(name, arr):
    """Raise if arr contains NaN or Inf; returns arr unchanged."""
    if not np.isfinite(arr).all():
        raise FloatingPointError("%s produced non-finite values" % name)
    return arr


def as_tensor(x):
    """Coerce to a C-contiguous float64 (C, H, W) array."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError("tensor must be 3-dimensional (C, H, W), got shape %r" % (a.shape,))
    return a


@dataclass(frozen=True)
class ConvParams:
    """Weights plus geometry for conv2d / conv_transpose2d_x2.

    weights: (out_ch, in_ch, kh, kw); bias: (out_ch,) or None.
    Kernel sides must be odd so same-size padding is well defined.
    """

    weights: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.ndim != 4:
            raise ValueError("conv weights must be (out_ch, in_ch, kh, kw)")
        if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
            raise ValueError("kernel sides must be odd, got %dx%d" % w.shape[2:])
        object.__setattr__(self, "weights", w)
        if self.bias is not None:
            b = np.ascontiguousarray(self.bias, dtype=np.float64)
            if b.shape != (w.shape[0],):
                raise ValueError(
                    "bias shape %r does not match out_ch %d" % (b.shape, w.shape[0])
                )
            object.__setattr__(self, "bias", b)

    @property
    def out_ch(self):
        return self.weights.shape[0]

    @property
    def in_ch(self):
        return self.weights.shape[1]


@dataclass(frozen=True)
class MlpParams:
    """Two-layer perceptron: out = w2 @ relu(w1 @ v + b1) + b2."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        w1 = np.ascontiguousarray(self.w1, dtype=np.float64)
        b1 = np.ascontiguousarray(self.b1, dtype=np.float64)
        w2 = np.ascontiguousarray(self.w2, dtype=np.float64)
        b2 = np.ascontiguousarray(self.b2, dtype=np.float64)
        if w1.ndim != 2 or w2.ndim != 2:
            raise ValueError("mlp weights must be 2-dimensional")
        if b1.shape != (w1.shape[0],) or w2.shape[1] != w1.shape[0] or b2.shape != (w2.shape[0],):
            raise ValueError(
                "mlp shape chain broken: w1 %r b1 %r w2 %r b2 %r"
                % (w1.shape, b1.shape, w2.shape, b2.shape)
            )
        for nm, a in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)):
            object.__setattr__(self, nm, a)

    @property
    def n_in(self):
        return self.w1.shape[1]

    @property
    def n_out(self):
        return self.w2.shape[0]


def conv2d(x, p):
    """Dense 2D convolution with zero padding.

    Output spatial size is floor((S + 2*pad - dilation*(k-1) - 1) / stride) + 1
    per side.
    """
    x = as_tensor(x)
    if x.shape[0] != p.in_ch:
        raise ValueError(
            "conv2d: input has %d channels but kernel expects %d" % (x.shape[0], p.in_ch)
        )
    kh, kw = p.weights.shape[2:]
    out_h = (x.shape[1] + 2 * p.padding - p.dilation * (kh - 1) - 1) // p.stride + 1
    out_w = (x.shape[2] + 2 * p.padding - p.dilation * (kw - 1) - 1) // p.stride + 1
    if out_h < 1 or out_w < 1:
        raise ValueError(
            "conv2d: kernel %dx%d at dilation %d does not fit input %dx%d"
            % (kh, kw, p.dilation, x.shape[1], x.shape[2])
        )
    y = backend.conv2d_fwd(x, p.weights, p.bias, p.stride, p.dilation, p.padding)
    return check_finite("conv2d", y)


def conv2d_input_grad(gy, p, in_hw):
    """Gradient of conv2d w.r.t. its input, given upstream gy (out_ch, OH, OW)."""
    gy = as_tensor(gy)
    height, width = in_hw
    kh, kw = p.weights.shape[2:]
    out_h, out_w = gy.shape[1], gy.shape[2]
    gxp = np.zeros(
        (p.in_ch, height + 2 * p.padding, width + 2 * p.padding), dtype=np.float64
    )
    for ky in range(kh):
        for kx in range(kw):
            ys = ky * p.dilation
            xs = kx * p.dilation
            gxp[
                :,
                ys : ys + (out_h - 1) * p.stride + 1 : p.stride,
                xs : xs + (out_w - 1) * p.stride + 1 : p.stride,
            ] += np.tensordot(p.weights[:, :, ky, kx], gy, axes=([0], [0]))
    if p.padding > 0:
        gxp = gxp[:, p.padding : p.padding + height, p.padding : p.padding + width]
    return check_finite("conv2d_input_grad", np.ascontiguousarray(gxp))


def conv_transpose2d_x2(x, p):
    """Stride-2 transposed convolution with a 3x3 kernel, output exactly (2H, 2W).

    Input pixel (iy, ix) scatters kernel tap (ky, kx) to output pixel
    (2*iy + ky - 1, 2*ix + kx - 1); taps falling outside are dropped.  This
    matches the usual transposed-conv with padding 1 and output padding 1.
    """
    x = as_tensor(x)
    if p.stride != 2 or p.weights.shape[2:] != (3, 3):
        raise ValueError(
            "conv_transpose2d_x2 requires stride 2 and a 3x3 kernel, got stride %d kernel %dx%d"
            % (p.stride, p.weights.shape[2], p.weights.shape[3])
        )
    if x.shape[0] != p.in_ch:
        raise ValueError(
            "conv_transpose2d_x2: input has %d channels but kernel expects %d"
            % (x.shape[0], p.in_ch)
        )
    y = backend.conv_transpose2d_x2_fwd(x, p.weights, p.bias)
    return check_finite("conv_transpose2d_x2", y)


def space2depth(x):
    """Fold each 2x2 spatial block into channels: (C, H, W) -> (4C, H/2, W/2).

    Block layout: output channel 4*c + 2*dy + dx holds x[c, dy::2, dx::2].
    """
    x = as_tensor(x)
    ch, height, width = x.shape
    if height % 2 or width % 2:
        raise ValueError("space2depth needs even spatial dims, got %dx%d" % (height, width))
    out = np.empty((ch, 4, height // 2, width // 2), dtype=np.float64)
    for dy in range(2):
        for dx in range(2):
            out[:, 2 * dy + dx] = x[:, dy::2, dx::2]
    return np.ascontiguousarray(out.reshape(4 * ch, height // 2, width // 2))


def depth2space(x):
    """Exact inverse of space2depth: (4C, H, W) -> (C, 2H, 2W)."""
    x = as_tensor(x)
    ch4, height, width = x.shape
    if ch4 % 4:
        raise ValueError("depth2space needs channels divisible by 4, got %d" % ch4)
    ch = ch4 // 4
    blocks = x.reshape(ch, 4, height, width)
    out = np.empty((ch, 2 * height, 2 * width), dtype=np.float64)
    for dy in range(2):
        for dx in range(2):
            out[:, dy::2, dx::2] = blocks[:, 2 * dy + dx]
    return out


def pool_spatial(x, mode):
    """Global pooling over the spatial axes, one value per channel."""
    x = as_tensor(x)
    if mode == "max":
        return x.max(axis=(1, 2))
    if mode == "avg":
        return x.mean(axis=(1, 2))
    raise ValueError("pool mode must be 'max' or 'avg', got %r" % mode)


def pool_channel(x, mode):
    """Pooling across channels, keeping the spatial map: (C,H,W) -> (1,H,W)."""
    x = as_tensor(x)
    if mode == "max":
        return x.max(axis=0, keepdims=True)
    if mode == "avg":
        return x.mean(axis=0, keepdims=True)
    raise ValueError("pool mode must be 'max' or 'avg', got %r" % mode)


def maxpool2d(x, k, stride):
    """Windowed spatial max; windows never read outside the input."""
    x = as_tensor(x)
    if k < 1 or stride < 1:
        raise ValueError("maxpool2d: k and stride must be >= 1")
    if k > x.shape[1] or k > x.shape[2]:
        raise ValueError(
            "maxpool2d: window %d exceeds input %dx%d" % (k, x.shape[1], x.shape[2])
        )
    y, _ = backend.maxpool2d_fwd(x, k, stride)
    return check_finite("maxpool2d", y)


def mlp(v, p):
    """Two-layer MLP on a flat vector: w2 @ relu(w1 @ v + b1) + b2."""
    v = np.ascontiguousarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != p.n_in:
        raise ValueError("mlp: expected vector of length %d, got shape %r" % (p.n_in, v.shape))
    h = np.maximum(p.w1 @ v + p.b1, 0.0)
    return check_finite("mlp", p.w2 @ h + p.b2)


# saturated activations are clamped one ulp inside their open ranges so that
# downstream log(p) / log(1-p) terms stay finite
_UNIT_LO = np.nextafter(0.0, 1.0)
_UNIT_HI = np.nextafter(1.0, 0.0)


def sigmoid(x):
    # both branches stay in exp() underflow territory rather than overflow
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _UNIT_LO, _UNIT_HI)


def activation(x, kind):
    """Elementwise nonlinearity: 'sigmoid', 'tanh' or 'relu'."""
    x = as_tensor(x)
    if kind == "sigmoid":
        y = sigmoid(x)
    elif kind == "tanh":
        y = np.clip(np.tanh(x), -_UNIT_HI, _UNIT_HI)
    elif kind == "relu":
        y = np.maximum(x, 0.0)
    else:
        raise ValueError("unknown activation %r" % kind)
    return check_finite("activation:" + kind, y)


def log1p_map(x):
    """Elementwise log(1 + x); defined only for non-negative input."""
    x = as_tensor(x)
    if (x < 0).any():
        raise ValueError("log1p_map requires non-negative input")
    return check_finite("log1p_map", np.log1p(x))


# ---------------------------------------------------------------------------
# Gradient-checkable op wrappers.  Each op exposes forward(x) and
# backward(x, gy); gy has the forward output's shape.  Only ops listed in the
# module docstring carry a backward.


class Conv2dOp:
    def __init__(self, params):
        self.params = params

    def forward(self, x):
        return conv2d(x, self.params)

    def backward(self, x, gy):
        return conv2d_input_grad(gy, self.params, (x.shape[1], x.shape[2]))


class MlpOp:
    def __init__(self, params):
        self.params = params

    def forward(self, v):
        return mlp(v, self.params)

    def backward(self, v, gy):
        p = self.params
        pre = p.w1 @ np.asarray(v, dtype=np.float64) + p.b1
        gh = (p.w2.T @ np.asarray(gy, dtype=np.float64)) * (pre > 0)
        return p.w1.T @ gh


class ActivationOp:
    def __init__(self, kind):
        self.kind = kind

    def forward(self, x):
        return activation(x, self.kind)

    def backward(self, x, gy):
        x = as_tensor(x)
        if self.kind == "sigmoid":
            s = sigmoid(x)
            return gy * s * (1.0 - s)
        if self.kind == "tanh":
            t = np.tanh(x)
            return gy * (1.0 - t * t)
        if self.kind == "relu":
            return gy * (x > 0)
        raise ValueError("unknown activation %r" % self.kind)


class PoolSpatialOp:
    def __init__(self, mode):
        self.mode = mode

    def forward(self, x):
        return pool_spatial(x, self.mode)

    def backward(self, x, gy):
        x = as_tensor(x)
        ch, height, width = x.shape
        gy = np.asarray(gy, dtype=np.float64)
        if self.mode == "avg":
            return np.broadcast_to(gy[:, None, None] / (height * width), x.shape).copy()
        gx = np.zeros_like(x)
        flat = x.reshape(ch, -1)
        # ties route to the first maximum in row-major order
        arg = np.argmax(flat, axis=1)
        gx.reshape(ch, -1)[np.arange(ch), arg] = gy
        return gx


class PoolChannelOp:
    def __init__(self, mode):
        self.mode = mode

    def forward(self, x):
        return pool_channel(x, self.mode)

    def backward(self, x, gy):
        x = as_tensor(x)
        gy = np.asarray(gy, dtype=np.float64)
        if self.mode == "avg":
            return np.broadcast_to(gy / x.shape[0], x.shape).copy()
        gx = np.zeros_like(x)
        arg = np.argmax(x, axis=0)
        yy, xx = np.meshgrid(
            np.arange(x.shape[1]), np.arange(x.shape[2]), indexing="ij"
        )
        gx[arg, yy, xx] = gy[0]
        return gx


class Maxpool2dOp:
    def __init__(self, k, stride):
        self.k = k
        self.stride = stride

    def forward(self, x):
        return maxpool2d(x, self.k, self.stride)

    def backward(self, x, gy):
        x = as_tensor(x)
        _, arg = backend.maxpool2d_fwd(x, self.k, self.stride)
        gy = np.asarray(gy, dtype=np.float64)
        gx = np.zeros_like(x)
        flat = gx.reshape(x.shape[0], -1)
        for c in range(x.shape[0]):
            np.add.at(flat[c], arg[c].reshape(-1), gy[c].reshape(-1))
        return gx


class EwiseMulOp:
    """x * other for a fixed second operand (gradient w.r.t. x only)."""

    def __init__(self, other):
        self.other = np.asarray(other, dtype=np.float64)

    def forward(self, x):
        return np.asarray(x, dtype=np.float64) * self.other

    def backward(self, x, gy):
        return np.asarray(gy, dtype=np.float64) * self.other


class EwiseAddOp:
    """x + other for a fixed second operand."""

    def __init__(self, other):
        self.other = np.asarray(other, dtype=np.float64)

    def forward(self, x):
        return np.asarray(x, dtype=np.float64) + self.other

    def backward(self, x, gy):
        return np.broadcast_to(np.asarray(gy, dtype=np.float64), np.shape(x)).copy()


def grad_check(op, x, epsilon=1e-5, cotangent=None):
    """Compare op's analytic input-gradient against central differences.

    The (possibly tensor-valued) output is reduced to a scalar through a
    fixed random cotangent so a single backward call covers every output
    element.  Returns the max relative error with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if not hasattr(op, "backward"):
        raise TypeError("op %r has no analytic backward" % type(op).__name__)
    x = np.array(x, dtype=np.float64)
    y = np.asarray(op.forward(x))
    if cotangent is None:
        cotangent = np.random.default_rng(0).standard_normal(y.shape)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    analytic = np.asarray(op.backward(x, cotangent), dtype=np.float64)
    numeric = np.empty_like(x)
    xw = x.copy()
    fw = xw.reshape(-1)
    fn = numeric.reshape(-1)
    for i in range(fw.size):
        orig = fw[i]
        fw[i] = orig + epsilon
        yp = np.asarray(op.forward(xw), dtype=np.float64)
        fw[i] = orig - epsilon
        ym = np.asarray(op.forward(xw), dtype=np.float64)
        fw[i] = orig
        # fsum keeps summation-order noise out of the near-zero gradients
        fn[i] = math.fsum(((yp - ym) * cotangent).ravel()) / (2.0 * epsilon)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))

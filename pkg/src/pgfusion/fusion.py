"""Multi-view backbone augmentation: CBAM attention blocks, the cascade
fusion of multi-scale range-view features, and the BEV downsampling chain.

Everything here is forward-only and pure.  Activation placement where the
design leaves slack: relu follows each transposed convolution; boundary
refinement and the final fusion 1x1 stay linear.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from pgfusion import tensorops as T


@dataclass(frozen=True)
class CbamParams:
    """Channel MLP (in == out == C, hidden C/ratio) plus a 2-in 1-out
    spatial convolution."""

    channel_mlp: T.MlpParams
    spatial_conv: T.ConvParams

    def __post_init__(self):
        m = self.channel_mlp
        if m.n_in != m.n_out:
            raise ValueError("cbam channel MLP must map C -> C, got %d -> %d" % (m.n_in, m.n_out))
        s = self.spatial_conv
        if s.in_ch != 2 or s.out_ch != 1:
            raise ValueError("cbam spatial conv must be 2-in 1-out")

    @property
    def channels(self):
        return self.channel_mlp.n_in


def make_cbam_params(channels, rng, ratio=4, k=7):
    hidden = max(1, channels // ratio)
    mlp = T.MlpParams(
        rng.normal(0.0, 1.0 / math.sqrt(channels), (hidden, channels)),
        np.zeros(hidden),
        rng.normal(0.0, 1.0 / math.sqrt(hidden), (channels, hidden)),
        np.zeros(channels),
    )
    conv = T.ConvParams(
        rng.normal(0.0, 1.0 / math.sqrt(2 * k * k), (1, 2, k, k)), None, padding=k // 2
    )
    return CbamParams(mlp, conv)


def cbam(x, p):
    """Channel-then-spatial attention refinement; output shape == input shape.

    Channel stage: sigmoid(mlp(spatial max pool) + mlp(spatial avg pool)),
    applied per channel.  Spatial stage on the reweighted map: sigmoid of a
    convolution over the stacked (channel max, channel avg) maps, applied per
    pixel.
    """
    x = T.as_tensor(x)
    if x.shape[0] != p.channels:
        raise ValueError(
            "cbam: input has %d channels, params expect %d" % (x.shape[0], p.channels)
        )
    ca_pre = T.mlp(T.pool_spatial(x, "max"), p.channel_mlp) + T.mlp(
        T.pool_spatial(x, "avg"), p.channel_mlp
    )
    ca = T.sigmoid(ca_pre)
    xc = x * ca[:, None, None]
    stacked = np.concatenate([T.pool_channel(xc, "max"), T.pool_channel(xc, "avg")])
    sa = T.sigmoid(T.conv2d(stacked, p.spatial_conv))
    return T.check_finite("cbam", xc * sa)


def boundary_refine(x, p):
    """Residual 3x3 convolution: x + conv(x); zero weights give the identity."""
    x = T.as_tensor(x)
    w = p.weights
    if w.shape[2:] != (3, 3) or p.stride != 1 or p.dilation != 1 or p.padding != 1:
        raise ValueError("boundary_refine needs a same-size 3x3 conv (stride 1, pad 1)")
    if w.shape[0] != w.shape[1] or w.shape[1] != x.shape[0]:
        raise ValueError(
            "boundary_refine conv must map %d -> %d channels" % (x.shape[0], x.shape[0])
        )
    return x + T.conv2d(x, p)


@dataclass(frozen=True)
class CascadeParams:
    """Parameters for cascade_fuse and bev_downsample_chain.

    The cascade runs coarse to fine: cbam1/up1/refine1 operate on the
    coarsest map, cbam2/up2/refine2 on the concat with the mid-scale map,
    cbam3/out_conv on the concat with the full-scale map.  downsample lists
    the 1x1 compression convs of the BEV chain (bias-free), one per
    space2depth stage.
    """

    cbam1: CbamParams
    up1: T.ConvParams
    refine1: T.ConvParams
    cbam2: CbamParams
    up2: T.ConvParams
    refine2: T.ConvParams
    cbam3: CbamParams
    out_conv: T.ConvParams
    downsample: tuple = field(default_factory=tuple)

    def __post_init__(self):
        for stage in self.downsample:
            if stage.weights.shape[2:] != (1, 1):
                raise ValueError("downsample compressions must be 1x1 convs")
            if stage.bias is not None:
                raise ValueError("downsample compressions must be bias-free")


def make_cascade_params(rng, c1=32, c2=16, c3=8, out_width=16, bev_widths=()):
    """Fixed-seed cascade parameters for channel chain c1 (1/4 scale),
    c2 (1/2), c3 (full).  bev_widths lists input channel counts per BEV
    downsample stage (each stage compresses 4*C to 2*C)."""

    def conv(out_ch, in_ch, k, stride=1, dilation=1, pad=None):
        w = rng.normal(0.0, 1.0 / math.sqrt(in_ch * k * k), (out_ch, in_ch, k, k))
        return T.ConvParams(
            w, None, stride=stride, dilation=dilation,
            padding=(k // 2 if pad is None else pad),
        )

    down = tuple(conv(2 * c, 4 * c, 1) for c in bev_widths)
    return CascadeParams(
        cbam1=make_cbam_params(c1, rng),
        up1=conv(c2, c1, 3, stride=2, pad=1),
        refine1=conv(c2, c2, 3),
        cbam2=make_cbam_params(2 * c2, rng),
        up2=conv(c3, 2 * c2, 3, stride=2, pad=1),
        refine2=conv(c3, c3, 3),
        cbam3=make_cbam_params(2 * c3, rng),
        out_conv=conv(out_width, 2 * c3, 1),
        downsample=down,
    )


def _up(x, p):
    return T.activation(T.conv_transpose2d_x2(x, p), "relu")


def cascade_fuse(r1, r2, r3, p):
    """Fuse three range-view scales (1/4, 1/2, full) into one full-resolution
    map: cbam -> upsample x2 -> boundary refine -> concat next scale, twice,
    then a final cbam and 1x1 projection."""
    r1, r2, r3 = T.as_tensor(r1), T.as_tensor(r2), T.as_tensor(r3)
    for coarse, fine, nm in (((r1), (r2), "r1->r2"), ((r2), (r3), "r2->r3")):
        if (2 * coarse.shape[1], 2 * coarse.shape[2]) != fine.shape[1:]:
            raise ValueError(
                "cascade_fuse: %s scales do not double: %r vs %r"
                % (nm, coarse.shape, fine.shape)
            )
    a = boundary_refine(_up(cbam(r1, p.cbam1), p.up1), p.refine1)
    b = boundary_refine(_up(cbam(np.concatenate([a, r2]), p.cbam2), p.up2), p.refine2)
    fused = cbam(np.concatenate([b, r3]), p.cbam3)
    return T.conv2d(fused, p.out_conv)


def bev_downsample_chain(x, p):
    """Halve resolution and double channels per stage: space2depth then a
    bias-free 1x1 compression (4C -> 2C in the standard configuration)."""
    x = T.as_tensor(x)
    n = len(p.downsample)
    if n and (x.shape[1] % (1 << n) or x.shape[2] % (1 << n)):
        raise ValueError(
            "input %dx%d not divisible by 2^%d" % (x.shape[1], x.shape[2], n)
        )
    for stage in p.downsample:
        folded = T.space2depth(x)
        if folded.shape[0] != stage.in_ch:
            raise ValueError(
                "downsample stage expects %d channels, got %d after space2depth"
                % (stage.in_ch, folded.shape[0])
            )
        x = T.conv2d(folded, stage)
    return x

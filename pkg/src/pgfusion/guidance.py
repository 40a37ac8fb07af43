"""Guidance mechanisms steering the BEV detector with panoptic information:
attention-based weighting of fused RV/BEV features, class-wise foreground
attention, and the center density heatmap with its residual application.

The density map squashes per-cell counts of offset-shifted foreground points
through tanh(log1p(.)), which takes the exact rational value
((n+1)^2 - 1) / ((n+1)^2 + 1) at integer count n; 0 points give exactly 0 and
1 point gives exactly 0.6.
"""

import math
from dataclasses import dataclass

import numpy as np

from pgfusion import backend, projection, tensorops as T


@dataclass(frozen=True)
class RvBevAttnParams:
    """Shared channel MLP over four pooled vectors, a 4-in 1-out dilated
    spatial conv, and the output 1x1 compression."""

    channel_mlp: T.MlpParams
    spatial_conv: T.ConvParams
    out_conv: T.ConvParams

    def __post_init__(self):
        m = self.channel_mlp
        if m.n_in != m.n_out:
            raise ValueError("attention MLP must map C_total -> C_total")
        s = self.spatial_conv
        if s.in_ch != 4 or s.out_ch != 1:
            raise ValueError("spatial stream conv must be 4-in 1-out")
        o = self.out_conv
        if o.weights.shape[2:] != (1, 1) or o.in_ch != m.n_in:
            raise ValueError("output conv must be 1x1 over the concat channels")

    @property
    def total_channels(self):
        return self.channel_mlp.n_in


def make_rvbev_attn_params(c_bev, c_rv, out_width, rng, ratio=4, k=3, dilation=3):
    c_total = c_bev + c_rv
    hidden = max(1, c_total // ratio)
    mlp = T.MlpParams(
        rng.normal(0.0, 1.0 / math.sqrt(c_total), (hidden, c_total)),
        np.zeros(hidden),
        rng.normal(0.0, 1.0 / math.sqrt(hidden), (c_total, hidden)),
        np.zeros(c_total),
    )
    spatial = T.ConvParams(
        rng.normal(0.0, 1.0 / math.sqrt(4 * k * k), (1, 4, k, k)),
        None,
        dilation=dilation,
        padding=dilation * (k // 2),
    )
    out = T.ConvParams(
        rng.normal(0.0, 1.0 / math.sqrt(c_total), (out_width, c_total, 1, 1)), None
    )
    return RvBevAttnParams(mlp, spatial, out)


def rv_bev_attention(bev, rv_in_bev, p):
    """Reweight the channel concat of BEV and RV-derived features.

    Channel stream: spatial max/avg pooling of each view gives four vectors;
    each is embedded at its own channel block within a zero vector of length
    C_total (BEV channels first), run through the shared MLP, and the four
    outputs are summed.  Space stream: the four depthwise-pooled maps
    (bev max, bev avg, rv max, rv avg) pass through the dilated conv.  Vector
    plus map, through a sigmoid, gates the concat multiplicatively; a 1x1
    conv then compresses to the configured width.
    """
    bev = T.as_tensor(bev)
    rv = T.as_tensor(rv_in_bev)
    if bev.shape[1:] != rv.shape[1:]:
        raise ValueError(
            "rv_bev_attention: spatial dims differ: %r vs %r" % (bev.shape, rv.shape)
        )
    c_bev, c_rv = bev.shape[0], rv.shape[0]
    c_total = c_bev + c_rv
    if c_total != p.total_channels:
        raise ValueError(
            "rv_bev_attention: params built for %d channels, inputs give %d"
            % (p.total_channels, c_total)
        )

    vec = np.zeros(c_total)
    for offset, view in ((0, bev), (c_bev, rv)):
        for mode in ("max", "avg"):
            padded = np.zeros(c_total)
            pooled = T.pool_spatial(view, mode)
            padded[offset : offset + pooled.shape[0]] = pooled
            vec = vec + T.mlp(padded, p.channel_mlp)

    maps = np.concatenate(
        [
            T.pool_channel(bev, "max"),
            T.pool_channel(bev, "avg"),
            T.pool_channel(rv, "max"),
            T.pool_channel(rv, "avg"),
        ]
    )
    plane = T.conv2d(maps, p.spatial_conv)
    att = T.sigmoid(vec[:, None, None] + plane)
    gated = np.concatenate([bev, rv]) * att
    return T.conv2d(gated, p.out_conv)


@dataclass(frozen=True)
class CfaParams:
    """Per-class bias-free 1x1 branch convs plus the bias-free merge conv."""

    branch_convs: tuple
    merge_conv: T.ConvParams

    def __post_init__(self):
        for c in self.branch_convs:
            if c.weights.shape[2:] != (1, 1) or c.bias is not None:
                raise ValueError("branch convs must be bias-free 1x1")
        m = self.merge_conv
        if m.weights.shape[2:] != (1, 1) or m.bias is not None:
            raise ValueError("merge conv must be bias-free 1x1")
        branch_out = sum(c.out_ch for c in self.branch_convs)
        if m.in_ch != branch_out:
            raise ValueError(
                "merge conv expects %d channels, branches produce %d"
                % (m.in_ch, branch_out)
            )

    @property
    def n_classes(self):
        return len(self.branch_convs)


def make_cfa_params(channels, n_classes, rng, branch_width=None):
    bw = branch_width or max(1, channels // 2)
    branches = tuple(
        T.ConvParams(
            rng.normal(0.0, 1.0 / math.sqrt(channels), (bw, channels, 1, 1)), None
        )
        for _ in range(n_classes)
    )
    merge = T.ConvParams(
        rng.normal(0.0, 1.0 / math.sqrt(n_classes * bw), (channels, n_classes * bw, 1, 1)),
        None,
    )
    return CfaParams(branches, merge)


def class_foreground_attention(x, probs_bev, p):
    """Inject class-wise foreground evidence: each class branch masks the
    features with its probability map and compresses them; the merged result
    is added back through a skip connection.  All-zero probability maps give
    back x bit-for-bit (every conv is bias-free)."""
    x = T.as_tensor(x)
    if len(probs_bev) != p.n_classes:
        raise ValueError(
            "expected %d probability maps, got %d" % (p.n_classes, len(probs_bev))
        )
    branches = []
    for k, (prob, conv) in enumerate(zip(probs_bev, p.branch_convs)):
        prob = np.asarray(prob, dtype=np.float64)
        if prob.shape != (1,) + x.shape[1:]:
            raise ValueError(
                "probability map %d has shape %r, expected %r"
                % (k, prob.shape, (1,) + x.shape[1:])
            )
        if (prob < 0).any() or (prob > 1).any():
            raise ValueError("probability map %d outside [0, 1]" % k)
        branches.append(T.conv2d(x * prob, conv))
    delta = T.conv2d(np.concatenate(branches), p.merge_conv)
    # keep x's exact bits (including -0.0) wherever the branch path is zero
    return np.where(delta == 0.0, x, x + delta)


@dataclass
class DensityHeatmap:
    """Eq-style squashed count map over a BEV grid; counts kept for
    verification."""

    grid: projection.BevSpec
    values: np.ndarray
    counts: np.ndarray


def center_density(xyz, panoptic, grid):
    """Count offset-shifted foreground points per BEV cell and squash with
    tanh(log1p(count)); shifted points leaving the grid are dropped."""
    xyz = np.asarray(xyz, dtype=np.float64)
    shifted = xyz + panoptic.center_offsets
    fg = np.asarray(panoptic.foreground_mask, dtype=bool)
    ix, iy, inb = projection.bev_bin(shifted, grid)
    sel = fg & inb
    counts = np.zeros((grid.rows, grid.cols), dtype=np.int64)
    if sel.any():
        counts = backend.count_cells(iy[sel], ix[sel], grid.rows, grid.cols)
    values = T.activation(T.log1p_map(counts[None].astype(np.float64)), "tanh")
    return DensityHeatmap(grid=grid, values=values, counts=counts)


def apply_density(x, h):
    """Residual multiplicative boost: out = x + x * h; an all-zero heatmap
    returns x bit-for-bit."""
    x = T.as_tensor(x)
    vals = h.values if isinstance(h, DensityHeatmap) else np.asarray(h, dtype=np.float64)
    if vals.shape != (1,) + x.shape[1:]:
        raise ValueError(
            "heatmap shape %r does not match features %r" % (vals.shape, x.shape)
        )
    return T.check_finite("apply_density", x + x * vals)

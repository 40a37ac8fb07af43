"""Range-view projection, surface normals, BEV gridding and RV->BEV transfer.

The range view is a spherical projection: columns bin azimuth over the full
[-pi, pi) turn, rows bin inclination top-down over a configurable band.
Pixel collisions keep the nearest point (ties: lowest point index); losing
points still know their pixel, so every point can gather an RV feature when
features are pushed to the BEV grid.

All functions take columnar float64 arrays and are pure.  Scatter reductions
are either order-independent (max) or accumulate over a canonically sorted
point order, so outputs are bit-identical under any permutation of the
input points.
"""

import math
from dataclasses import dataclass

import numpy as np

from pgfusion import backend
from pgfusion.tensorops import check_finite

TAU = 2.0 * math.pi


@dataclass(frozen=True)
class RvSpec:
    """Range-image geometry.  Azimuth always spans the full [-pi, pi) turn;
    the inclination band is configurable."""

    height: int = 32
    width: int = 256
    incl_min: float = -0.5236
    incl_max: float = 0.1745

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ValueError("range image must be at least 2x2")
        if not self.incl_min < self.incl_max:
            raise ValueError(
                "inclination band empty: [%g, %g]" % (self.incl_min, self.incl_max)
            )


@dataclass
class RangeImage:
    """Projection result.

    features: (5, H, W) with channels (x, y, z, range, intensity) of each
    pixel's winning point, zero where no point landed.  pixel_of_point maps
    every input point to its (row, col), (-1, -1) when the point fell outside
    the inclination band.  point_of_pixel holds the winning point index per
    pixel, -1 when empty.
    """

    spec: RvSpec
    features: np.ndarray
    valid: np.ndarray
    pixel_of_point: np.ndarray
    point_of_pixel: np.ndarray
    n_dropped: int


def rv_project(xyz, intensity, spec):
    """Spherical projection with nearest-point collision resolution."""
    xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    intensity = np.ascontiguousarray(intensity, dtype=np.float64)
    n = xyz.shape[0]
    if n == 0:
        raise ValueError("rv_project: empty point cloud")
    r = np.sqrt((xyz**2).sum(axis=1))
    if (r <= 0).any():
        raise ValueError("rv_project: point with non-positive range")

    incl = np.arcsin(np.clip(xyz[:, 2] / r, -1.0, 1.0))
    kept = (incl >= spec.incl_min) & (incl <= spec.incl_max)

    az = np.arctan2(xyz[:, 1], xyz[:, 0])
    col = np.floor((az + math.pi) / TAU * spec.width).astype(np.int64)
    np.clip(col, 0, spec.width - 1, out=col)
    row = np.floor(
        (spec.incl_max - incl) / (spec.incl_max - spec.incl_min) * spec.height
    ).astype(np.int64)
    np.clip(row, 0, spec.height - 1, out=row)

    pixel_of_point = np.full((n, 2), -1, dtype=np.int64)
    pixel_of_point[kept, 0] = row[kept]
    pixel_of_point[kept, 1] = col[kept]

    kept_idx = np.flatnonzero(kept)
    pop_kept = backend.rv_assign(
        row[kept_idx], col[kept_idx], r[kept_idx], spec.height, spec.width
    )
    point_of_pixel = np.where(pop_kept >= 0, kept_idx[pop_kept].astype(np.int32), -1)
    point_of_pixel = np.ascontiguousarray(point_of_pixel, dtype=np.int32)

    valid = point_of_pixel >= 0
    features = np.zeros((5, spec.height, spec.width), dtype=np.float64)
    win = point_of_pixel[valid]
    features[0][valid] = xyz[win, 0]
    features[1][valid] = xyz[win, 1]
    features[2][valid] = xyz[win, 2]
    features[3][valid] = r[win]
    features[4][valid] = intensity[win]
    check_finite("rv_project", features)

    return RangeImage(
        spec=spec,
        features=features,
        valid=valid,
        pixel_of_point=pixel_of_point,
        point_of_pixel=point_of_pixel,
        n_dropped=int(n - kept.sum()),
    )


def surface_normals(img):
    """Unit normals per valid pixel from cross products of neighbor
    differences, oriented toward the sensor; zero where fewer than one usable
    difference exists per axis (or the differences are colinear)."""
    height, width = img.spec.height, img.spec.width
    pts = np.moveaxis(img.features[0:3], 0, -1)
    valid = img.valid

    def shifted(dy, dx):
        v = np.zeros_like(valid)
        p = np.zeros_like(pts)
        ys = slice(max(dy, 0), height + min(dy, 0))
        yd = slice(max(-dy, 0), height + min(-dy, 0))
        xs = slice(max(dx, 0), width + min(dx, 0))
        xd = slice(max(-dx, 0), width + min(-dx, 0))
        v[yd, xd] = valid[ys, xs]
        p[yd, xd] = pts[ys, xs]
        return v, p

    v_r, p_r = shifted(0, 1)
    v_l, p_l = shifted(0, -1)
    v_d, p_d = shifted(1, 0)
    v_u, p_u = shifted(-1, 0)

    def axis_diff(v_pos, p_pos, v_neg, p_neg):
        both = v_pos & v_neg
        pos_only = v_pos & ~v_neg
        neg_only = v_neg & ~v_pos
        diff = np.zeros_like(pts)
        diff[both] = p_pos[both] - p_neg[both]
        diff[pos_only] = p_pos[pos_only] - pts[pos_only]
        diff[neg_only] = pts[neg_only] - p_neg[neg_only]
        return diff, v_pos | v_neg

    dh, h_ok = axis_diff(v_r, p_r, v_l, p_l)
    dv, v_ok = axis_diff(v_d, p_d, v_u, p_u)

    raw = np.cross(dh, dv)
    norm = np.linalg.norm(raw, axis=-1)
    usable = valid & h_ok & v_ok & (norm > 0)
    unit = np.zeros_like(raw)
    unit[usable] = raw[usable] / norm[usable, None]
    flip = (unit * pts).sum(axis=-1) > 0
    unit[flip] = -unit[flip]
    out = np.ascontiguousarray(np.moveaxis(unit, -1, 0))
    return check_finite("surface_normals", out)


@dataclass(frozen=True)
class BevSpec:
    """Top-down grid: x bins become columns, y bins become rows; cells are
    half-open [lo, lo + cell)."""

    x_min: float = -25.6
    x_max: float = 25.6
    y_min: float = -25.6
    y_max: float = 25.6
    cell: float = 0.4

    def __post_init__(self):
        if self.cell <= 0:
            raise ValueError("cell size must be positive")
        for lo, hi, nm in ((self.x_min, self.x_max, "x"), (self.y_min, self.y_max, "y")):
            n = (hi - lo) / self.cell
            if n < 1 or abs(n - round(n)) > 1e-9:
                raise ValueError(
                    "%s extent %g..%g is not an integer number of %g m cells"
                    % (nm, lo, hi, self.cell)
                )

    @property
    def cols(self):
        return int(round((self.x_max - self.x_min) / self.cell))

    @property
    def rows(self):
        return int(round((self.y_max - self.y_min) / self.cell))


def bev_bin(xyz, spec):
    """Per-point cell indices (ix, iy) plus an in-range mask; out-of-range
    points (including the exact max boundary) are masked out."""
    xyz = np.asarray(xyz, dtype=np.float64)
    ix = np.floor((xyz[:, 0] - spec.x_min) / spec.cell).astype(np.int64)
    iy = np.floor((xyz[:, 1] - spec.y_min) / spec.cell).astype(np.int64)
    inb = (ix >= 0) & (ix < spec.cols) & (iy >= 0) & (iy < spec.rows)
    return ix, iy, inb


def _canonical(flat, xyz_sub, *extra):
    """Sort key making per-cell accumulation order independent of input
    order: cell first, then coordinates (duplicates carry equal values, so
    their relative order cannot change any sum)."""
    keys = list(extra)[::-1] + [xyz_sub[:, 2], xyz_sub[:, 1], xyz_sub[:, 0], flat]
    return np.lexsort(tuple(keys))


def pillarize(xyz, intensity, spec, labels=None):
    """Per-cell pillar statistics: (log1p(count), mean z, max z, mean
    intensity); empty cells all-zero.  labels ride along for API symmetry but
    the four channels are label-free."""
    xyz = np.asarray(xyz, dtype=np.float64)
    intensity = np.asarray(intensity, dtype=np.float64)
    ix, iy, inb = bev_bin(xyz, spec)
    sub = np.flatnonzero(inb)
    flat = iy[sub] * spec.cols + ix[sub]
    order = _canonical(flat, xyz[sub], intensity[sub])
    sub = sub[order]
    raw = backend.scatter_pillar(
        iy[sub], ix[sub], xyz[sub, 2], intensity[sub], spec.rows, spec.cols
    )
    count, sum_z, max_z, sum_i = raw
    occ = count > 0
    out = np.zeros((4, spec.rows, spec.cols), dtype=np.float64)
    out[0] = np.log1p(count)
    out[1][occ] = sum_z[occ] / count[occ]
    out[2] = max_z
    out[3][occ] = sum_i[occ] / count[occ]
    return check_finite("pillarize", out)


def rv_to_bev(rv_features, img, xyz, spec, reduce="max"):
    """Transfer RV features to the BEV grid through the point cloud.

    Each point gathers the feature at its RV pixel (collision losers share
    the winner's pixel) and scatters it into its BEV cell; cells combine by
    max or exact-count mean.  rv_features may live at the full RV resolution
    or an integer downscale of it.
    """
    rv_features = np.asarray(rv_features, dtype=np.float64)
    if reduce not in ("max", "mean"):
        raise ValueError("reduce must be 'max' or 'mean', got %r" % reduce)
    ch, fh, fw = rv_features.shape
    sh, rem_h = divmod(img.spec.height, fh)
    sw, rem_w = divmod(img.spec.width, fw)
    if rem_h or rem_w or sh != sw:
        raise ValueError(
            "feature grid %dx%d is not an integer downscale of range image %dx%d"
            % (fh, fw, img.spec.height, img.spec.width)
        )
    xyz = np.asarray(xyz, dtype=np.float64)
    ix, iy, inb = bev_bin(xyz, spec)
    kept = img.pixel_of_point[:, 0] >= 0
    sub = np.flatnonzero(inb & kept)
    out = np.zeros((ch, spec.rows, spec.cols), dtype=np.float64)
    if sub.size == 0:
        return out
    flat = iy[sub] * spec.cols + ix[sub]
    order = _canonical(flat, xyz[sub])
    sub = sub[order]
    rows = img.pixel_of_point[sub, 0] // sh
    cols = img.pixel_of_point[sub, 1] // sh
    vals = rv_features[:, rows, cols]
    if reduce == "max":
        out = backend.scatter_max(vals, iy[sub], ix[sub], spec.rows, spec.cols)
    else:
        sums, counts = backend.scatter_sum_count(
            vals, iy[sub], ix[sub], spec.rows, spec.cols
        )
        occ = counts > 0
        out = np.zeros_like(sums)
        out[:, occ] = sums[:, occ] / counts[occ]
    return check_finite("rv_to_bev", out)

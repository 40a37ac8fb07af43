"""Miniature BEV detection stack: fixed-seed backbone, center-heatmap target
generation, the two supervised losses with analytic gradients, and peak
decoding back to boxes.

Head tensor layout
------------------
heatmaps: (K, H, W) per-class center scores in (0, 1).
regression: (6, H, W) = (dx, dy in cells, log l, log w, sin yaw, cos yaw).
z_h: (2, H, W) = (z in meters, log h).

Class channel k corresponds to class_id k + 1 (channel 0 is the first
foreground class; background has no channel).
"""

import math
from dataclasses import dataclass

import numpy as np

from pgfusion import backend, tensorops as T
from pgfusion.scene import Box7


@dataclass
class HeadOutput:
    heatmaps: np.ndarray
    regression: np.ndarray
    z_h: np.ndarray

    def __post_init__(self):
        k, h, w = self.heatmaps.shape
        if self.regression.shape != (6, h, w) or self.z_h.shape != (2, h, w):
            raise ValueError(
                "head tensors disagree: heat %r regression %r z_h %r"
                % (self.heatmaps.shape, self.regression.shape, self.z_h.shape)
            )


@dataclass
class DetectionSet:
    """Decoded boxes, scores descending; provenance[i] = (row, col, class_id)."""

    boxes: list
    provenance: list


def make_backbone_params(in_ch, width, rng, n_layers=3):
    chain = []
    for i in range(n_layers):
        ci = in_ch if i == 0 else width
        w = rng.normal(0.0, 1.0 / math.sqrt(ci * 9), (width, ci, 3, 3))
        chain.append(T.ConvParams(w, None, padding=1))
    return tuple(chain)


def mini_backbone(bev_in, params):
    """Three same-resolution 3x3 conv + relu layers (all bias-free)."""
    x = T.as_tensor(bev_in)
    for p in params:
        x = T.activation(T.conv2d(x, p), "relu")
    return x


def gaussian_radius(size_cells, min_overlap=0.1):
    """CenterNet radius rule: the largest radius keeping IoU >= min_overlap
    for a box of the given (height, width) in cells, under the three
    corner-shift cases."""
    height, width = size_cells
    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap)
    r1 = (b1 - math.sqrt(b1 * b1 - 4.0 * a1 * c1)) / 2.0

    a2 = 4.0
    b2 = 2.0 * (height + width)
    c2 = (1.0 - min_overlap) * width * height
    r2 = (b2 - math.sqrt(b2 * b2 - 4.0 * a2 * c2)) / (2.0 * a2)

    a3 = 4.0 * min_overlap
    b3 = -2.0 * min_overlap * (height + width)
    c3 = (min_overlap - 1.0) * width * height
    r3 = (-b3 + math.sqrt(b3 * b3 - 4.0 * a3 * c3)) / (2.0 * a3)
    return min(r1, r2, r3)


def center_cell(box, grid):
    """Cell indices (ix, iy) of the box center, or None if off-grid."""
    ix = math.floor((box.cx - grid.x_min) / grid.cell)
    iy = math.floor((box.cy - grid.y_min) / grid.cell)
    if 0 <= ix < grid.cols and 0 <= iy < grid.rows:
        return ix, iy
    return None


def splat_radius(box, grid, min_overlap=0.1, floor=2):
    return max(floor, int(gaussian_radius((box.l / grid.cell, box.w / grid.cell), min_overlap)))


def gaussian_targets(boxes, grid, n_classes, min_overlap=0.1, floor=2):
    """Per-class center heatmap targets: unnormalized Gaussian splats with
    peak exactly 1 at each box's center cell, combined by elementwise max.
    Returns (targets, n_skipped) where n_skipped counts off-grid boxes."""
    targets = np.zeros((n_classes, grid.rows, grid.cols), dtype=np.float64)
    skipped = 0
    for box in boxes:
        cc = center_cell(box, grid)
        if cc is None:
            skipped += 1
            continue
        cix, ciy = cc
        radius = splat_radius(box, grid, min_overlap, floor)
        sigma = (2.0 * radius + 1.0) / 6.0
        y0, y1 = max(0, ciy - radius), min(grid.rows, ciy + radius + 1)
        x0, x1 = max(0, cix - radius), min(grid.cols, cix + radius + 1)
        yy = np.arange(y0, y1) - ciy
        xx = np.arange(x0, x1) - cix
        g = np.exp(
            -(yy[:, None] ** 2 + xx[None, :] ** 2) / (2.0 * sigma * sigma)
        )
        ch = box.class_id - 1
        np.maximum(targets[ch, y0:y1, x0:x1], g, out=targets[ch, y0:y1, x0:x1])
    return targets, skipped


def focal_loss(pred, target):
    """Penalty-reduced focal loss (alpha 2, beta 4) over every heatmap cell,
    normalized by max(1, number of peak cells).  Returns (loss, dloss/dpred).

    Cells where target == 1 are peaks; all other cells contribute the
    down-weighted negative term.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("pred/target shapes differ: %r vs %r" % (pred.shape, target.shape))
    if (pred <= 0).any() or (pred >= 1).any():
        raise ValueError("focal_loss: pred must lie strictly in (0, 1)")
    if (target < 0).any() or (target > 1).any():
        raise ValueError("focal_loss: target must lie in [0, 1]")

    peaks = target == 1.0
    n = max(1, int(peaks.sum()))
    one_m_p = 1.0 - pred
    log_p = np.log(pred)
    log_1mp = np.log1p(-pred)

    loss_pos = -(one_m_p**2) * log_p
    loss_neg = -((1.0 - target) ** 4) * pred**2 * log_1mp
    loss = float(np.where(peaks, loss_pos, loss_neg).sum()) / n

    grad_pos = 2.0 * one_m_p * log_p - (one_m_p**2) / pred
    grad_neg = -((1.0 - target) ** 4) * (
        2.0 * pred * log_1mp - pred**2 / one_m_p
    )
    grad = np.where(peaks, grad_pos, grad_neg) / n
    return loss, grad


def smooth_l1(pred, target, mask):
    """Smooth L1 over masked cells only: 0.5 d^2 for |d| < 1, |d| - 0.5
    beyond, summed over the masked cells of every channel and normalized by
    the masked-cell count.  Returns (loss, dloss/dpred); an empty mask gives
    exactly zero loss and gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or mask.shape != pred.shape[1:]:
        raise ValueError(
            "smooth_l1 shapes: pred %r target %r mask %r"
            % (pred.shape, target.shape, mask.shape)
        )
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(pred)
    d = (pred - target) * mask
    a = np.abs(d)
    per = np.where(a < 1.0, 0.5 * d * d, a - 0.5)
    loss = float((per * mask).sum()) / n
    grad = np.clip(d, -1.0, 1.0) * mask / n
    return loss, grad


class FocalLossOp:
    """grad_check adapter; input is the prediction map."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64)

    def forward(self, pred):
        return np.float64(focal_loss(pred, self.target)[0])

    def backward(self, pred, gy):
        return focal_loss(pred, self.target)[1] * float(gy)


class SmoothL1Op:
    def __init__(self, target, mask):
        self.target = np.asarray(target, dtype=np.float64)
        self.mask = np.asarray(mask, dtype=bool)

    def forward(self, pred):
        return np.float64(smooth_l1(pred, self.target, self.mask)[0])

    def backward(self, pred, gy):
        return smooth_l1(pred, self.target, self.mask)[1] * float(gy)


def encode_boxes(boxes, grid, n_classes, heat_floor=1e-9):
    """Exact head encoding of ground-truth boxes.

    Heatmaps are the Gaussian targets clamped into (0, 1); regression and
    z/log-h maps hold, for every cell within a box's splat radius, the exact
    values that decode that cell back to the box (nearest box center wins
    where windows overlap).  Center offsets are stored per cell, so a peak
    displaced a cell or two still decodes near the true center.
    """
    targets, _ = gaussian_targets(boxes, grid, n_classes)
    heat = np.clip(targets, heat_floor, 1.0 - 1e-9)
    regression = np.zeros((6, grid.rows, grid.cols), dtype=np.float64)
    z_h = np.zeros((2, grid.rows, grid.cols), dtype=np.float64)
    owner_dist = np.full((grid.rows, grid.cols), np.inf)

    for box in boxes:
        cc = center_cell(box, grid)
        if cc is None:
            continue
        cix, ciy = cc
        radius = splat_radius(box, grid)
        y0, y1 = max(0, ciy - radius), min(grid.rows, ciy + radius + 1)
        x0, x1 = max(0, cix - radius), min(grid.cols, cix + radius + 1)
        ys = np.arange(y0, y1)
        xs = np.arange(x0, x1)
        cell_cx = grid.x_min + (xs + 0.5) * grid.cell
        cell_cy = grid.y_min + (ys + 0.5) * grid.cell
        dx = (box.cx - cell_cx)[None, :] / grid.cell
        dy = (box.cy - cell_cy)[:, None] / grid.cell
        dist2 = (dx * grid.cell) ** 2 + (dy * grid.cell) ** 2
        win = dist2 < owner_dist[y0:y1, x0:x1]
        owner_dist[y0:y1, x0:x1][win] = dist2[win]
        sub = regression[:, y0:y1, x0:x1]
        sub[0][win] = np.broadcast_to(dx, win.shape)[win]
        sub[1][win] = np.broadcast_to(dy, win.shape)[win]
        sub[2][win] = math.log(box.l)
        sub[3][win] = math.log(box.w)
        sub[4][win] = math.sin(box.yaw)
        sub[5][win] = math.cos(box.yaw)
        zsub = z_h[:, y0:y1, x0:x1]
        zsub[0][win] = box.cz
        zsub[1][win] = math.log(box.h)
    return HeadOutput(heatmaps=heat, regression=regression, z_h=z_h)


def decode(head, grid, k_max=32, score_min=0.05):
    """Peak decoding: a cell is a peak iff it is the row-major-first maximum
    of its 3x3 class-channel neighborhood.  Peaks scoring >= score_min are
    decoded, best k_max kept, sorted by descending score (ties: class, then
    row-major cell)."""
    n_classes, rows, cols = head.heatmaps.shape
    cands = []
    for k in range(n_classes):
        hm = head.heatmaps[k]
        padded = np.full((1, rows + 2, cols + 2), -np.inf)
        padded[0, 1:-1, 1:-1] = hm
        _, arg = backend.maxpool2d_fwd(padded, 3, 1)
        own = (np.arange(1, rows + 1)[:, None]) * (cols + 2) + np.arange(1, cols + 1)
        peak = (arg[0] == own) & (hm >= score_min)
        for iy, ix in np.argwhere(peak):
            cands.append((-hm[iy, ix], k, iy, ix))
    cands.sort()
    boxes = []
    provenance = []
    for negscore, k, iy, ix in cands[:k_max]:
        dx, dy, log_l, log_w, sin_y, cos_y = head.regression[:, iy, ix]
        z, log_h = head.z_h[:, iy, ix]
        # atan2(0, 0) == 0 covers the all-zero regression convention
        yaw = math.atan2(sin_y, cos_y)
        if yaw >= math.pi:
            yaw = -math.pi
        boxes.append(
            Box7(
                cx=grid.x_min + (ix + 0.5) * grid.cell + dx * grid.cell,
                cy=grid.y_min + (iy + 0.5) * grid.cell + dy * grid.cell,
                cz=float(z),
                l=math.exp(log_l),
                w=math.exp(log_w),
                h=math.exp(log_h),
                yaw=yaw,
                class_id=k + 1,
                score=float(-negscore),
            )
        )
        provenance.append((int(iy), int(ix), k + 1))
    return DetectionSet(boxes=boxes, provenance=provenance)

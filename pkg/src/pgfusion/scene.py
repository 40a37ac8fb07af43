"""Synthetic LiDAR scenes and the oracle panoptic provider.

A Scene is a columnar point cloud (float32-quantized coordinates held in
float64 arrays) plus per-point labels and ground-truth boxes.  The generator
places non-overlapping boxes on a ground plane, samples each object as a box
shell plus interior fill, and adds ground points and optional clutter blobs.

The panoptic provider stands in for a trained segmentation network: it derives
class probabilities, a foreground mask and box-center offsets from ground
truth, corrupted by configurable noise, and runs a small fixed-seed range-view
encoder to produce the multi-scale feature maps consumed by downstream fusion.

Coordinates pass through float32 on creation so that the binary scene format
(which stores 32-bit floats) round-trips bit-exactly, and so that zero-noise
center offsets invert exactly in float64 arithmetic.
"""

import csv
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from pgfusion import projection, tensorops
from pgfusion.seeding import STREAM_ENCODER, STREAM_PANOPTIC, STREAM_SCENE, derive_rng

MAGIC = b"PGF1"


@dataclass(frozen=True)
class Point:
    x: float
    y: float
    z: float
    intensity: float


@dataclass(frozen=True)
class PointLabel:
    class_id: int
    instance_id: int


@dataclass(frozen=True)
class Box7:
    """Upright box: center, size, yaw about z.  score is 1.0 for ground truth."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError("box sides must be positive, got %r" % ((self.l, self.w, self.h),))
        if not (-math.pi <= self.yaw < math.pi):
            raise ValueError("yaw must lie in [-pi, pi), got %r" % self.yaw)

    @property
    def bev_radius(self):
        """Circumscribed BEV circle radius."""
        return 0.5 * math.hypot(self.l, self.w)

    def contains(self, xyz, margin=0.0):
        """Boolean mask of points inside the box inflated by margin (meters)."""
        xyz = np.asarray(xyz, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = xyz[:, 0] - self.cx
        dy = xyz[:, 1] - self.cy
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        lz = xyz[:, 2] - self.cz
        return (
            (np.abs(lx) <= self.l / 2 + margin)
            & (np.abs(ly) <= self.w / 2 + margin)
            & (np.abs(lz) <= self.h / 2 + margin)
        )


@dataclass
class Scene:
    """Columnar scene: xyz (N,3), intensity (N,), class_id/instance_id (N,).

    class_id 0 is background; foreground classes are 1..n_classes.  Point i of
    instance j satisfies boxes[j-1].contains.  Stored per-axis values are
    exactly representable as float32.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    class_id: np.ndarray
    instance_id: np.ndarray
    boxes: list
    n_classes: int
    seed: int

    @property
    def n_points(self):
        return self.xyz.shape[0]

    def point(self, i):
        return Point(self.xyz[i, 0], self.xyz[i, 1], self.xyz[i, 2], self.intensity[i])

    def label(self, i):
        return PointLabel(int(self.class_id[i]), int(self.instance_id[i]))

    def ranges(self):
        return np.sqrt((self.xyz**2).sum(axis=1))

    def foreground(self):
        return self.class_id > 0

    def validate(self, margin=0.01):
        """Check the structural invariants; raises ValueError on violation."""
        n = self.n_points
        if not (
            self.intensity.shape == (n,)
            and self.class_id.shape == (n,)
            and self.instance_id.shape == (n,)
        ):
            raise ValueError("column lengths disagree")
        if n and self.ranges().min() <= 0:
            raise ValueError("point at zero range")
        if ((self.intensity < 0) | (self.intensity > 1)).any():
            raise ValueError("intensity outside [0, 1]")
        fg = self.class_id > 0
        if not ((self.instance_id > 0) == fg).all():
            raise ValueError("instance_id/class_id foreground mismatch")
        if fg.any() and self.class_id.max() > self.n_classes:
            raise ValueError("class_id exceeds n_classes")
        ids = np.unique(self.instance_id[self.instance_id > 0])
        if ids.size and (ids.min() < 1 or ids.max() > len(self.boxes)):
            raise ValueError("instance_id without a box")
        for j in ids:
            box = self.boxes[j - 1]
            pts = self.xyz[self.instance_id == j]
            if not box.contains(pts, margin).all():
                raise ValueError("instance %d has points outside its box" % j)
        for j, box in enumerate(self.boxes):
            if not (1 <= box.class_id <= self.n_classes):
                raise ValueError("box %d class_id %d out of range" % (j, box.class_id))
        return self


@dataclass(frozen=True)
class SceneConfig:
    """Generator knobs.  Defaults give a desk-scale three-class scene."""

    x_range: tuple = (-25.6, 25.6)
    y_range: tuple = (-25.6, 25.6)
    n_classes: int = 3
    class_sizes: tuple = ((4.2, 1.9, 1.6), (0.7, 0.7, 1.7), (0.45, 0.45, 0.7))
    objects_per_class: tuple = (2, 2, 2)
    points_per_object: tuple = (360, 140, 80)
    interior_fraction: float = 0.15
    size_jitter: float = 0.08
    n_ground: int = 4000
    ground_noise: float = 0.02
    sensor_height: float = 1.8
    clutter_blobs: int = 0
    points_per_blob: int = 120
    blob_sigma: float = 0.14
    blob_height: tuple = (0.2, 1.2)
    placement_radius: tuple = (4.0, 21.0)
    min_gap: float = 0.8
    min_range: float = 0.8
    max_place_tries: int = 200

    def __post_init__(self):
        if not (1 <= self.n_classes <= 10):
            raise ValueError("n_classes must be in [1, 10], got %d" % self.n_classes)
        if not (
            len(self.class_sizes) >= self.n_classes
            and len(self.objects_per_class) >= self.n_classes
            and len(self.points_per_object) >= self.n_classes
        ):
            raise ValueError("per-class tuples shorter than n_classes")
        if len(self.blob_height) != 2 or self.blob_height[0] > self.blob_height[1]:
            raise ValueError("blob_height must be (lo, hi) with lo <= hi")


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _sample_box_points(rng, box, n_total, interior_fraction):
    """Shell samples on the six faces (area-weighted) plus interior fill."""
    n_interior = int(round(n_total * interior_fraction))
    n_shell = n_total - n_interior
    half = np.array([box.l / 2, box.w / 2, box.h / 2])
    areas = np.array(
        [
            box.w * box.h,
            box.w * box.h,
            box.l * box.h,
            box.l * box.h,
            box.l * box.w,
            box.l * box.w,
        ]
    )
    face = rng.choice(6, size=n_shell, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, (n_shell, 2))
    local = np.empty((n_shell, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        m = axis == a
        others = [o for o in range(3) if o != a]
        local[m, a] = sign[m] * half[a]
        local[m, others[0]] = u[m, 0] * half[others[0]]
        local[m, others[1]] = u[m, 1] * half[others[1]]
    inner = rng.uniform(-1.0, 1.0, (n_interior, 3)) * half
    local = np.vstack([local, inner])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.cx
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.cy
    world[:, 2] = local[:, 2] + box.cz
    return world


def generate_scene(config, seed):
    """Deterministic synthetic scene for (config, seed).

    Raises RuntimeError when box placement cannot satisfy the non-overlap
    constraint within config.max_place_tries draws per object.
    """
    rng = derive_rng(seed, STREAM_SCENE)
    boxes = []
    for cls in range(1, config.n_classes + 1):
        lwh0 = config.class_sizes[cls - 1]
        for _ in range(config.objects_per_class[cls - 1]):
            placed = False
            for _ in range(config.max_place_tries):
                lwh = [
                    v * (1.0 + config.size_jitter * rng.uniform(-1, 1)) for v in lwh0
                ]
                radius = rng.uniform(*config.placement_radius)
                theta = rng.uniform(-math.pi, math.pi)
                cx, cy = radius * math.cos(theta), radius * math.sin(theta)
                yaw = rng.uniform(-math.pi, math.pi)
                cand = Box7(
                    cx,
                    cy,
                    -config.sensor_height + lwh[2] / 2,
                    lwh[0],
                    lwh[1],
                    lwh[2],
                    yaw,
                    cls,
                )
                margin_ok = (
                    config.x_range[0] + cand.bev_radius < cx < config.x_range[1] - cand.bev_radius
                    and config.y_range[0] + cand.bev_radius < cy < config.y_range[1] - cand.bev_radius
                )
                clear = all(
                    math.hypot(b.cx - cx, b.cy - cy)
                    > b.bev_radius + cand.bev_radius + config.min_gap
                    for b in boxes
                )
                if margin_ok and clear:
                    boxes.append(cand)
                    placed = True
                    break
            if not placed:
                raise RuntimeError(
                    "could not place a class-%d box after %d tries; "
                    "reduce object count or enlarge the area" % (cls, config.max_place_tries)
                )

    chunks_xyz = []
    chunks_cls = []
    chunks_inst = []
    for j, box in enumerate(boxes):
        pts = _sample_box_points(
            rng, box, config.points_per_object[box.class_id - 1], config.interior_fraction
        )
        chunks_xyz.append(pts)
        chunks_cls.append(np.full(len(pts), box.class_id, dtype=np.int32))
        chunks_inst.append(np.full(len(pts), j + 1, dtype=np.int32))

    gx = rng.uniform(config.x_range[0], config.x_range[1], config.n_ground)
    gy = rng.uniform(config.y_range[0], config.y_range[1], config.n_ground)
    gz = -config.sensor_height + rng.normal(0.0, config.ground_noise, config.n_ground)
    chunks_xyz.append(np.column_stack([gx, gy, gz]))
    chunks_cls.append(np.zeros(config.n_ground, dtype=np.int32))
    chunks_inst.append(np.zeros(config.n_ground, dtype=np.int32))

    for _ in range(config.clutter_blobs):
        radius = rng.uniform(*config.placement_radius)
        theta = rng.uniform(-math.pi, math.pi)
        center = np.array(
            [
                radius * math.cos(theta),
                radius * math.sin(theta),
                -config.sensor_height
                + rng.uniform(config.blob_height[0], config.blob_height[1]),
            ]
        )
        blob = center + rng.normal(0.0, config.blob_sigma, (config.points_per_blob, 3))
        chunks_xyz.append(blob)
        chunks_cls.append(np.zeros(config.points_per_blob, dtype=np.int32))
        chunks_inst.append(np.zeros(config.points_per_blob, dtype=np.int32))

    xyz = _f32(np.vstack(chunks_xyz))
    class_id = np.concatenate(chunks_cls)
    instance_id = np.concatenate(chunks_inst)
    intensity = _f32(rng.uniform(0.05, 0.95, len(xyz)))

    keep = np.sqrt((xyz**2).sum(axis=1)) >= config.min_range
    scene = Scene(
        xyz=xyz[keep],
        intensity=intensity[keep],
        class_id=class_id[keep],
        instance_id=instance_id[keep],
        boxes=[
            replace(
                b,
                cx=float(np.float32(b.cx)),
                cy=float(np.float32(b.cy)),
                cz=float(np.float32(b.cz)),
                l=float(np.float32(b.l)),
                w=float(np.float32(b.w)),
                h=float(np.float32(b.h)),
                yaw=float(np.float32(b.yaw)),
            )
            for b in boxes
        ],
        n_classes=config.n_classes,
        seed=seed,
    )
    return scene.validate()


@dataclass(frozen=True)
class PanopticNoise:
    """Corruption applied to the oracle panoptic outputs.

    eps_sem: per-point probability of flipping the class label to a uniformly
    chosen other class; sigma_off: isotropic Gaussian noise on center offsets
    (meters); eps_mask: per-point probability of flipping the foreground mask.
    """

    eps_sem: float = 0.0
    sigma_off: float = 0.0
    eps_mask: float = 0.0
    encoder_seed: int = 7

    def __post_init__(self):
        if self.eps_sem < 0 or self.sigma_off < 0 or self.eps_mask < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.eps_sem > 1 or self.eps_mask > 1:
            raise ValueError("flip probabilities must be <= 1")


@dataclass
class PanopticEstimate:
    class_probs: np.ndarray
    foreground_mask: np.ndarray
    center_offsets: np.ndarray
    rv_feats: dict


def _encoder_params(n_in, noise_seed):
    """Fixed-seed forward-only encoder weights.

    The full-resolution stage is a single 1x1 conv whose first n_in output
    rows are the identity (the raw geometric channels pass through untouched)
    and whose last two rows are fixed-seed mixtures (stand-ins for learned
    features), so r3 carries 6 geometric + 2 learned channels.  Two stride-2
    convolutions then halve resolution twice.
    """
    rng = derive_rng(noise_seed, STREAM_ENCODER)
    w3 = np.zeros((n_in + 2, n_in, 1, 1))
    for c in range(n_in):
        w3[c, c, 0, 0] = 1.0
    w3[n_in:] = rng.normal(0.0, 1.0 / math.sqrt(n_in), (2, n_in, 1, 1))
    p3 = tensorops.ConvParams(w3, None)

    def conv_p(out_ch, in_ch, k, stride):
        w = rng.normal(0.0, 1.0 / math.sqrt(in_ch * k * k), (out_ch, in_ch, k, k))
        return tensorops.ConvParams(w, None, stride=stride, padding=k // 2)

    return p3, conv_p(16, n_in + 2, 3, 2), conv_p(32, 16, 3, 2)


def encoder_feats(scene, rv_spec, noise):
    """Multi-scale RV features: r3 full resolution, r2 half, r1 quarter."""
    img = projection.rv_project(scene.xyz, scene.intensity, rv_spec)
    normals = projection.surface_normals(img)
    geom = np.concatenate([normals, img.features[0:3]], axis=0)
    p3, p2, p1 = _encoder_params(geom.shape[0], noise.encoder_seed)
    r3 = tensorops.conv2d(geom, p3)
    r2 = tensorops.activation(tensorops.conv2d(r3, p2), "relu")
    r1 = tensorops.activation(tensorops.conv2d(r2, p1), "relu")
    return {"r1": r1, "r2": r2, "r3": r3}


def oracle_panoptic(scene, noise, seed, rv_spec=None):
    """Ground-truth-derived panoptic outputs with configurable corruption.

    With zero noise: probabilities are one-hot on the true class, the mask
    equals ground truth, and for every foreground point p with box center c,
    p + offset == c exactly (both are float32-quantized, so the float64
    subtraction is lossless).
    """
    if rv_spec is None:
        rv_spec = projection.RvSpec()
    rng = derive_rng(seed, STREAM_PANOPTIC)
    n = scene.n_points
    k = scene.n_classes

    labels = scene.class_id.astype(np.int64)
    if noise.eps_sem > 0:
        flip = rng.random(n) < noise.eps_sem
        # uniform over the K other classes, skipping the true one
        draw = rng.integers(0, k, n)
        flipped = np.where(draw >= labels, draw + 1, draw)
        labels = np.where(flip, flipped, labels)
    probs = np.zeros((n, k + 1), dtype=np.float64)
    probs[np.arange(n), labels] = 1.0

    mask = scene.class_id > 0
    if noise.eps_mask > 0:
        mask = mask ^ (rng.random(n) < noise.eps_mask)

    offsets = np.zeros((n, 3), dtype=np.float64)
    fg = scene.instance_id > 0
    if fg.any():
        centers = np.array(
            [[b.cx, b.cy, b.cz] for b in scene.boxes], dtype=np.float64
        )
        offsets[fg] = centers[scene.instance_id[fg] - 1] - scene.xyz[fg]
    if noise.sigma_off > 0:
        offsets = offsets + rng.normal(0.0, noise.sigma_off, (n, 3)) * fg[:, None]

    return PanopticEstimate(
        class_probs=probs,
        foreground_mask=mask,
        center_offsets=offsets,
        rv_feats=encoder_feats(scene, rv_spec, noise),
    )


# ---------------------------------------------------------------------------
# Scene file format: little-endian binary, magic "PGF1", uint32 counts
# {N, B, K}, N point records (x, y, z, intensity float32; class_id,
# instance_id int32), B box records (cx, cy, cz, l, w, h, yaw float32;
# class_id int32).  CSV twins carry the same columns in text form.

_POINT_DT = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("z", "<f4"),
        ("intensity", "<f4"),
        ("class_id", "<i4"),
        ("instance_id", "<i4"),
    ]
)
_BOX_DT = np.dtype(
    [
        ("cx", "<f4"),
        ("cy", "<f4"),
        ("cz", "<f4"),
        ("l", "<f4"),
        ("w", "<f4"),
        ("h", "<f4"),
        ("yaw", "<f4"),
        ("class_id", "<i4"),
    ]
)


def save_scene(path, scene):
    """Write the binary scene format; lossless for generated scenes."""
    pts = np.empty(scene.n_points, dtype=_POINT_DT)
    pts["x"], pts["y"], pts["z"] = scene.xyz[:, 0], scene.xyz[:, 1], scene.xyz[:, 2]
    pts["intensity"] = scene.intensity
    pts["class_id"] = scene.class_id
    pts["instance_id"] = scene.instance_id
    bxs = np.empty(len(scene.boxes), dtype=_BOX_DT)
    for j, b in enumerate(scene.boxes):
        bxs[j] = (b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, b.class_id)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", scene.n_points, len(scene.boxes), scene.n_classes))
        fh.write(pts.tobytes())
        fh.write(bxs.tobytes())


def load_scene(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError("%s: bad magic %r, expected %r" % (path, magic, MAGIC))
        n, b, k = struct.unpack("<III", fh.read(12))
        pts = np.frombuffer(fh.read(n * _POINT_DT.itemsize), dtype=_POINT_DT, count=n)
        bxs = np.frombuffer(fh.read(b * _BOX_DT.itemsize), dtype=_BOX_DT, count=b)
    boxes = [
        Box7(
            float(r["cx"]),
            float(r["cy"]),
            float(r["cz"]),
            float(r["l"]),
            float(r["w"]),
            float(r["h"]),
            float(r["yaw"]),
            int(r["class_id"]),
        )
        for r in bxs
    ]
    return Scene(
        xyz=np.column_stack([pts["x"], pts["y"], pts["z"]]).astype(np.float64),
        intensity=pts["intensity"].astype(np.float64),
        class_id=pts["class_id"].copy(),
        instance_id=pts["instance_id"].copy(),
        boxes=boxes,
        n_classes=int(k),
        seed=-1,
    )


def save_scene_csv(stem, scene):
    """Text export: <stem>.points.csv and <stem>.boxes.csv, same columns as
    the binary format.  %.9g keeps float32 values exact."""
    with open(str(stem) + ".points.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "y", "z", "intensity", "class_id", "instance_id"])
        for i in range(scene.n_points):
            wr.writerow(
                ["%.9g" % v for v in scene.xyz[i]]
                + ["%.9g" % scene.intensity[i], int(scene.class_id[i]), int(scene.instance_id[i])]
            )
    with open(str(stem) + ".boxes.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["cx", "cy", "cz", "l", "w", "h", "yaw", "class_id", "n_classes"])
        for b in scene.boxes:
            wr.writerow(
                ["%.9g" % v for v in (b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw)]
                + [b.class_id, scene.n_classes]
            )


def load_scene_csv(stem, n_classes=None):
    with open(str(stem) + ".points.csv", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    # the text format mirrors the 32-bit binary one: parse through float32
    # so both twins load to identical float64 values
    xyz = _f32([[float(r[0]), float(r[1]), float(r[2])] for r in rows])
    xyz = xyz.reshape(-1, 3)
    intensity = _f32([float(r[3]) for r in rows])
    class_id = np.array([int(r[4]) for r in rows], dtype=np.int32)
    instance_id = np.array([int(r[5]) for r in rows], dtype=np.int32)
    boxes = []
    with open(str(stem) + ".boxes.csv", newline="") as fh:
        brows = list(csv.reader(fh))[1:]
    for r in brows:
        boxes.append(Box7(*[float(np.float32(v)) for v in r[:7]], int(r[7])))
        if n_classes is None:
            n_classes = int(r[8])
    if n_classes is None:
        n_classes = int(class_id.max()) if len(class_id) else 1
    return Scene(
        xyz=xyz,
        intensity=intensity,
        class_id=class_id,
        instance_id=instance_id,
        boxes=boxes,
        n_classes=n_classes,
        seed=-1,
    )

"""End-to-end synthetic pipeline and the guidance ablation around it.

Per scene: generate -> panoptic oracle -> BEV pillars -> optional guidance
stages -> mini backbone -> detection head -> decode, then pooled evaluation
over the scene set.

The detection head here is a TEST SCAFFOLD, not a trained model.  Its
heatmap branch is built from the ground-truth Gaussian targets corrupted by
seeded additive noise (sigma_heat) and mixed with z-scored channels of the
backbone output; its regression branch is the exact ground-truth encoding
plus seeded center noise.  The guidance toggles therefore influence scores
only through the backbone features they modulate, which is exactly the
effect the ablation isolates.  Noise draws depend only on (seed, scene
index), never on the toggles, so ablation rows see identical corruption.
"""

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import repeat

import numpy as np

from .. import backend
from ..detection import (
    HeadOutput,
    decode,
    encode_boxes,
    gaussian_targets,
    make_backbone_params,
    mini_backbone,
)
from ..fusion import cascade_fuse, make_cascade_params
from ..guidance import (
    apply_density,
    center_density,
    class_foreground_attention,
    make_cfa_params,
    make_rvbev_attn_params,
    rv_bev_attention,
)
from ..projection import BevSpec, RvSpec, bev_bin, pillarize, rv_project, rv_to_bev
from ..scene import PanopticNoise, SceneConfig, generate_scene, oracle_panoptic
from ..seeding import STREAM_HEAD, STREAM_PARAMS, derive_rng
from ..tensorops import sigmoid
from .metrics import evaluate

_PILLAR_CHANNELS = 4
_CASCADE_WIDTH = 16
_MAX_SCENES = 1 << 20


@dataclass(frozen=True)
class Toggles:
    """Guidance stages: multi-view branch attention (mba), class-wise
    foreground attention (cfa), center density heatmap (cdh)."""

    mba: bool = False
    cfa: bool = False
    cdh: bool = False

    NAMES = ("mba", "cfa", "cdh")

    @classmethod
    def from_names(cls, names):
        """Parse 'mba,cfa' style lists; empty or 'none' means all off."""
        if isinstance(names, str):
            names = [n.strip() for n in names.split(",") if n.strip()]
        names = list(names)
        if names == ["none"]:
            names = []
        unknown = [n for n in names if n not in cls.NAMES]
        if unknown:
            raise ValueError(
                "unknown toggles %r; valid names: %s" % (unknown, ", ".join(cls.NAMES))
            )
        return cls(**{n: True for n in names})

    def names(self):
        return tuple(n for n in self.NAMES if getattr(self, n))


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline run depends on.

    Only workers and out_dir are operational: they never change the numbers,
    and the metrics echo leaves them out so reruns compare byte-identical.
    """

    scene: SceneConfig = field(default_factory=SceneConfig)
    noise: PanopticNoise = field(default_factory=PanopticNoise)
    bev: BevSpec = field(default_factory=BevSpec)
    rv: RvSpec = field(default_factory=RvSpec)
    toggles: Toggles = field(default_factory=Toggles)
    seed: int = 0
    n_scenes: int = 8
    param_seed: int = 7
    backbone_width: int = 8
    attn_width: int = 8
    heat_gain: float = 4.0
    feat_gain: float = 1.0
    sigma_heat: float = 0.3
    k_max: int = 32
    score_min: float = 0.05
    workers: int = 1
    out_dir: str | None = None

    def __post_init__(self):
        problems = []
        if self.seed < 0:
            problems.append("seed must be >= 0")
        if not (1 <= self.n_scenes <= _MAX_SCENES):
            problems.append("n_scenes must be in [1, %d]" % _MAX_SCENES)
        if self.param_seed < 0:
            problems.append("param_seed must be >= 0")
        if self.backbone_width < self.scene.n_classes:
            problems.append(
                "backbone_width (%d) must cover one channel per class (%d)"
                % (self.backbone_width, self.scene.n_classes)
            )
        if self.attn_width < 1:
            problems.append("attn_width must be >= 1")
        if self.heat_gain <= 0:
            problems.append("heat_gain must be positive")
        if self.feat_gain < 0:
            problems.append("feat_gain must be >= 0")
        if self.sigma_heat < 0:
            problems.append("sigma_heat must be >= 0")
        if self.k_max < 1:
            problems.append("k_max must be >= 1")
        if not (0.0 <= self.score_min < 1.0):
            problems.append("score_min must be in [0, 1)")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        if problems:
            raise ValueError("invalid run config: " + "; ".join(problems))


_SECTION_TYPES = {
    "scene": SceneConfig,
    "noise": PanopticNoise,
    "bev": BevSpec,
    "rv": RvSpec,
    "toggles": Toggles,
}


def _tupled(v):
    if isinstance(v, list):
        return tuple(_tupled(x) for x in v)
    return v


def config_to_dict(config):
    """Plain-data mirror of a RunConfig, suitable for JSON."""
    return dataclasses.asdict(config)


def config_from_dict(data):
    """Inverse of config_to_dict; unknown keys are an error, absent keys
    keep their defaults."""
    if not isinstance(data, dict):
        raise ValueError("config must be a JSON object, got %r" % type(data))
    data = dict(data)
    kwargs = {}
    for key, cls in _SECTION_TYPES.items():
        if key not in data:
            continue
        sub = data.pop(key)
        if not isinstance(sub, dict):
            raise ValueError("config key %r must be an object" % key)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(sub) - names)
        if unknown:
            raise ValueError("unknown keys under %r: %s" % (key, ", ".join(unknown)))
        kwargs[key] = cls(**{k: _tupled(v) for k, v in sub.items()})
    scalars = {f.name for f in dataclasses.fields(RunConfig)} - set(_SECTION_TYPES)
    unknown = sorted(set(data) - scalars)
    if unknown:
        raise ValueError("unknown config keys: %s" % ", ".join(unknown))
    kwargs.update(data)
    return RunConfig(**kwargs)


def config_echo(config):
    """Config echo for metrics files: the numeric inputs only."""
    echo = config_to_dict(config)
    echo.pop("workers")
    echo.pop("out_dir")
    return echo


@dataclass(frozen=True)
class _Params:
    cascade: object
    attn: object
    cfa: object
    backbone: tuple


def _build_params(config):
    """Fixed network weights; each component draws from its own stream so
    toggling one never reshuffles another."""
    cascade = attn = cfa = None
    in_ch = _PILLAR_CHANNELS
    if config.toggles.mba:
        cascade = make_cascade_params(
            derive_rng(config.param_seed, STREAM_PARAMS, 0), out_width=_CASCADE_WIDTH
        )
        attn = make_rvbev_attn_params(
            _PILLAR_CHANNELS,
            _CASCADE_WIDTH,
            config.attn_width,
            derive_rng(config.param_seed, STREAM_PARAMS, 1),
        )
        in_ch = config.attn_width
    if config.toggles.cfa:
        cfa = make_cfa_params(
            in_ch, config.scene.n_classes, derive_rng(config.param_seed, STREAM_PARAMS, 2)
        )
    backbone = make_backbone_params(
        in_ch, config.backbone_width, derive_rng(config.param_seed, STREAM_PARAMS, 3)
    )
    return _Params(cascade=cascade, attn=attn, cfa=cfa, backbone=backbone)


def scene_seed(run_seed, index):
    # disjoint per-scene seed blocks; n_scenes <= _MAX_SCENES keeps it injective
    return (run_seed << 20) + index


def _class_prob_maps(scene, est, grid):
    """Per-class BEV maps: mean class probability of the points in each
    cell; empty cells zero.  Means of values in [0, 1] stay in [0, 1]."""
    ix, iy, inb = bev_bin(scene.xyz, grid)
    sub = np.flatnonzero(inb)
    vals = np.ascontiguousarray(est.class_probs[sub, 1:].T)
    sums, counts = backend.scatter_sum_count(
        vals, iy[sub], ix[sub], grid.rows, grid.cols
    )
    occ = counts > 0
    maps = np.zeros((scene.n_classes, grid.rows, grid.cols), dtype=np.float64)
    maps[:, occ] = sums[:, occ] / counts[occ]
    return [maps[k][None] for k in range(scene.n_classes)]


def _head_scaffold(scene, feats, config, base_seed):
    """Scaffold detection head (see module docstring).

    Heat logits: heat_gain * (targets + sigma_heat * noise) + feat_gain *
    z-scored backbone channel.  Regression: exact encoding with the panoptic
    offset noise scale applied to the center channels (in cells).
    """
    grid = config.bev
    k = scene.n_classes
    targets, skipped = gaussian_targets(scene.boxes, grid, k)
    enc = encode_boxes(scene.boxes, grid, k)
    rng = derive_rng(base_seed, STREAM_HEAD)
    eta = rng.standard_normal((k, grid.rows, grid.cols))
    center_eta = rng.standard_normal((2, grid.rows, grid.cols))
    # channel mean of the relu backbone estimates per-cell feature norm;
    # tanh of its z-score bounds the evidence so the target term keeps
    # the last word at true centers
    channel = feats.mean(axis=0)
    z = (channel - channel.mean()) / (channel.std() + 1e-6)
    evidence = np.tanh(z / 2.0)[None]
    logits = (
        config.heat_gain * (targets + config.sigma_heat * eta)
        + config.feat_gain * evidence
    )
    regression = enc.regression.copy()
    regression[0:2] += (config.noise.sigma_off / grid.cell) * center_eta
    head = HeadOutput(heatmaps=sigmoid(logits), regression=regression, z_h=enc.z_h)
    return head, skipped


@dataclass(frozen=True)
class SceneRun:
    dets: object
    gt_boxes: tuple
    heat: np.ndarray
    n_skipped: int


def run_scene(config, params, index):
    """One scene through the full pipeline; pure function of its inputs."""
    base = scene_seed(config.seed, index)
    scene = generate_scene(config.scene, base)
    est = oracle_panoptic(scene, config.noise, base, rv_spec=config.rv)
    bev_in = pillarize(scene.xyz, scene.intensity, config.bev)
    if config.toggles.mba:
        img = rv_project(scene.xyz, scene.intensity, config.rv)
        fused = cascade_fuse(
            est.rv_feats["r1"], est.rv_feats["r2"], est.rv_feats["r3"], params.cascade
        )
        # Gate the fused range features by the panoptic foreground belief of
        # each pixel's winner point before lifting them to BEV.  The range
        # branch then contributes object evidence only, which is the whole
        # point of consulting a second view.
        fg_prob = 1.0 - est.class_probs[:, 0]
        gate = np.zeros((1,) + img.valid.shape)
        gate[0][img.valid] = fg_prob[img.point_of_pixel[img.valid]]
        rv_in_bev = rv_to_bev(fused * gate, img, scene.xyz, config.bev, reduce="max")
        bev_in = rv_bev_attention(bev_in, rv_in_bev, params.attn)
    if config.toggles.cfa:
        probs = _class_prob_maps(scene, est, config.bev)
        bev_in = class_foreground_attention(bev_in, probs, params.cfa)
    feats = mini_backbone(bev_in, params.backbone)
    if config.toggles.cdh:
        feats = apply_density(feats, center_density(scene.xyz, est, config.bev))
    head, skipped = _head_scaffold(scene, feats, config, base)
    dets = decode(head, config.bev, k_max=config.k_max, score_min=config.score_min)
    return SceneRun(
        dets=dets, gt_boxes=tuple(scene.boxes), heat=head.heatmaps, n_skipped=skipped
    )


def run_pipeline(config):
    """Run all scenes and evaluate.

    Returns (EvalResult, artifacts); artifacts carry per-scene detections,
    ground truth and final heatmaps, in scene order.  Scenes are independent
    tasks, so the worker count changes wall time only, never a number.
    """
    params = _build_params(config)
    indices = range(config.n_scenes)
    if config.workers <= 1:
        runs = [run_scene(config, params, i) for i in indices]
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            runs = list(pool.map(run_scene, repeat(config), repeat(params), indices))
    dets = [r.dets for r in runs]
    gts = [list(r.gt_boxes) for r in runs]
    result = evaluate(dets, gts, config.scene.n_classes)
    artifacts = {
        "detections": dets,
        "gt_boxes": gts,
        "heatmaps": [r.heat for r in runs],
        "skipped_boxes": int(sum(r.n_skipped for r in runs)),
    }
    return result, artifacts


ABLATION_ROWS = (
    ("none", Toggles()),
    ("+mba", Toggles(mba=True)),
    ("+mba+cfa", Toggles(mba=True, cfa=True)),
    ("+mba+cfa+cdh", Toggles(mba=True, cfa=True, cdh=True)),
)


@dataclass(frozen=True)
class AblationRow:
    name: str
    toggles: Toggles
    per_seed: tuple
    mean: float
    delta: float
    per_seed_delta: tuple


@dataclass(frozen=True)
class AblationResult:
    """Cumulative toggle ladder; deltas are against the previous row.

    Monotonicity is reported, not guaranteed: the mean deltas say how much
    each added stage moved pooled mAP on this configuration and seed set.
    """

    seeds: tuple
    rows: tuple

    @property
    def monotonic(self):
        return all(r.delta >= 0 for r in self.rows[1:])


def ablate(config, seeds):
    """Run the toggle ladder for every seed; >= 3 seeds required."""
    seeds = tuple(int(s) for s in seeds)
    if len(seeds) < 3:
        raise ValueError("ablation needs at least 3 seeds, got %d" % len(seeds))
    if len(set(seeds)) != len(seeds):
        raise ValueError("ablation seeds must be distinct, got %r" % (seeds,))
    rows = []
    prev = None
    for name, toggles in ABLATION_ROWS:
        per_seed = []
        for s in seeds:
            cfg = dataclasses.replace(config, toggles=toggles, seed=s)
            result, _ = run_pipeline(cfg)
            per_seed.append(result.mean_ap)
        per_seed = tuple(per_seed)
        mean = float(np.mean(per_seed))
        if prev is None:
            delta, per_seed_delta = 0.0, tuple(0.0 for _ in seeds)
        else:
            delta = mean - prev.mean
            per_seed_delta = tuple(a - b for a, b in zip(per_seed, prev.per_seed))
        row = AblationRow(
            name=name,
            toggles=toggles,
            per_seed=per_seed,
            mean=mean,
            delta=delta,
            per_seed_delta=per_seed_delta,
        )
        rows.append(row)
        prev = row
    return AblationResult(seeds=seeds, rows=tuple(rows))


def ablation_payload(result, config=None):
    rows = []
    for row in result.rows:
        rows.append(
            {
                "name": row.name,
                "toggles": list(row.toggles.names()),
                "per_seed_map": list(row.per_seed),
                "mean_map": row.mean,
                "delta_vs_prev": row.delta,
                "per_seed_delta": list(row.per_seed_delta),
            }
        )
    payload = {
        "schema": "pgf-ablation/1",
        "seeds": list(result.seeds),
        "rows": rows,
        "monotonic": result.monotonic,
    }
    if config is not None:
        payload["config"] = config_echo(config)
    return payload


def save_ablation_csv(path, result):
    """One row per toggle combination: mean mAP, delta, then per-seed
    columns; floats carry 17 significant digits."""
    cols = ["row", "toggles", "mean_map", "delta_vs_prev"]
    cols += ["map_seed%d" % s for s in result.seeds]
    cols += ["delta_seed%d" % s for s in result.seeds]
    lines = [",".join(cols)]
    for row in result.rows:
        cells = [
            row.name,
            "+".join(row.toggles.names()) or "none",
            "%.17g" % row.mean,
            "%.17g" % row.delta,
        ]
        cells += ["%.17g" % v for v in row.per_seed]
        cells += ["%.17g" % v for v in row.per_seed_delta]
        lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines))
        f.write("\n")


def synth_v1():
    """The fixed ablation benchmark configuration.

    Scenes carry dense overhead clutter blobs placed high enough to fall
    outside the range view's inclination band: their tall pillar statistics
    saturate the feature evidence and decode as unmatchable false peaks,
    while the foreground-gated range branch never sees them.  Panoptic
    noise: 5% label flips, 0.2 m offset noise; head scaffold noise 0.3.
    """
    return RunConfig(
        scene=SceneConfig(
            objects_per_class=(4, 3, 3),
            clutter_blobs=12,
            points_per_blob=400,
            blob_sigma=1.1,
            blob_height=(4.5, 6.0),
        ),
        noise=PanopticNoise(eps_sem=0.05, sigma_off=0.2, eps_mask=0.0),
        bev=BevSpec(cell=0.8),
        n_scenes=64,
        attn_width=12,
        feat_gain=3.0,
        sigma_heat=0.3,
    )

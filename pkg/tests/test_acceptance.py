"""Acceptance suite: the eight gate checks, one test and one printed
pass/fail line each, every check against an independent reference and a
wall-clock budget."""

import contextlib
import dataclasses
import json
import math
import os
import time

import numpy as np
import pytest

from pgfusion.detection import decode, encode_boxes, gaussian_targets
from pgfusion.guidance import (
    center_density,
    class_foreground_attention,
    make_cfa_params,
    make_rvbev_attn_params,
    rv_bev_attention,
)
from pgfusion.harness.cli import GRADCHECK_TOL, _gradcheck_cases, main
from pgfusion.harness.metrics import THRESHOLDS, evaluate, match_and_ap
from pgfusion.harness.pipeline import (
    RunConfig,
    Toggles,
    ablate,
    config_to_dict,
    synth_v1,
)
from pgfusion.projection import (
    BevSpec,
    RvSpec,
    pillarize,
    rv_project,
    rv_to_bev,
)
from pgfusion.scene import (
    Box7,
    PanopticNoise,
    SceneConfig,
    generate_scene,
    oracle_panoptic,
)
from pgfusion.detection import center_cell
from pgfusion.tensorops import (
    ConvParams,
    conv2d,
    depth2space,
    grad_check,
    space2depth,
)


@contextlib.contextmanager
def criterion(num, label, budget, capsys):
    """Print exactly one pass/fail line per criterion, straight to the
    terminal, and enforce the wall-clock budget."""
    t0 = time.monotonic()
    ok = False
    try:
        yield
        elapsed = time.monotonic() - t0
        assert elapsed < budget, (
            "criterion %d took %.1fs, budget %gs" % (num, elapsed, budget)
        )
        ok = True
    finally:
        elapsed = time.monotonic() - t0
        with capsys.disabled():
            print(
                "criterion %d %s (%.1fs / %gs): %s"
                % (num, "PASS" if ok else "FAIL", elapsed, budget, label)
            )


# -- 1: the squashed-count transform equals its closed form --


def test_criterion_1_density_transform_closed_form(capsys):
    with criterion(1, "tanh(log1p(n)) equals rational closed form", 1.0, capsys):
        rng = np.random.default_rng(101)
        n = np.exp(rng.uniform(0.0, math.log(1e6), 10000))
        n = np.concatenate([n, np.arange(16.0)])
        got = np.tanh(np.log1p(n))
        m = n + 1.0
        want = (m * m - 1.0) / (m * m + 1.0)
        assert np.abs(got - want).max() <= 1e-12
        assert np.tanh(np.log1p(0.0)) == 0.0
        assert np.tanh(np.log1p(1.0)) == 0.6


# -- 2: kernel oracles --


def _conv_oracle(x, p):
    w, stride, dil, pad = p.weights, p.stride, p.dilation, p.padding
    oc, ic, kh, kw = w.shape
    _, h, win = x.shape
    xp = np.zeros((ic, h + 2 * pad, win + 2 * pad))
    xp[:, pad : pad + h, pad : pad + win] = x
    oh = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    ow = (win + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((oc, oh, ow))
    for o in range(oc):
        for oy in range(oh):
            for ox in range(ow):
                acc = 0.0
                for i in range(ic):
                    for ky in range(kh):
                        for kx in range(kw):
                            acc += w[o, i, ky, kx] * xp[
                                i, oy * stride + ky * dil, ox * stride + kx * dil
                            ]
                out[o, oy, ox] = acc
        if p.bias is not None:
            out[o] += p.bias[o]
    return out


def _cell_of(v, lo, cell, extent):
    i = int(math.floor((v - lo) / cell))
    return i if 0 <= i < extent else None


def _pillar_oracle(xyz, intensity, spec):
    out = np.zeros((4, spec.rows, spec.cols))
    cells = {}
    for p, w in zip(xyz, intensity):
        ix = _cell_of(p[0], spec.x_min, spec.cell, spec.cols)
        iy = _cell_of(p[1], spec.y_min, spec.cell, spec.rows)
        if ix is None or iy is None:
            continue
        cells.setdefault((iy, ix), []).append((p[2], w))
    for (iy, ix), vals in cells.items():
        zs = [v[0] for v in vals]
        ws = [v[1] for v in vals]
        out[0, iy, ix] = math.log1p(len(vals))
        out[1, iy, ix] = sum(zs) / len(zs)
        out[2, iy, ix] = max(zs)
        out[3, iy, ix] = sum(ws) / len(ws)
    return out


def _rv_to_bev_oracle(feats, img, xyz, spec):
    ch = feats.shape[0]
    scale = img.spec.height // feats.shape[1]
    out = np.zeros((ch, spec.rows, spec.cols))
    filled = np.zeros((spec.rows, spec.cols), dtype=bool)
    for i, p in enumerate(xyz):
        py, px = img.pixel_of_point[i]
        if py < 0:
            continue
        ix = _cell_of(p[0], spec.x_min, spec.cell, spec.cols)
        iy = _cell_of(p[1], spec.y_min, spec.cell, spec.rows)
        if ix is None or iy is None:
            continue
        f = feats[:, py // scale, px // scale]
        if filled[iy, ix]:
            out[:, iy, ix] = np.maximum(out[:, iy, ix], f)
        else:
            out[:, iy, ix] = f
            filled[iy, ix] = True
    return out


def _mlp_oracle(v, p):
    hidden = np.maximum(p.w1 @ v + p.b1, 0.0)
    return p.w2 @ hidden + p.b2


def _attention_oracle(bev, rv, p):
    c_bev = bev.shape[0]
    c_total = c_bev + rv.shape[0]
    vec = np.zeros(c_total)
    for off, view in ((0, bev), (c_bev, rv)):
        for pool in (lambda a: a.max(axis=(1, 2)), lambda a: a.mean(axis=(1, 2))):
            padded = np.zeros(c_total)
            padded[off : off + view.shape[0]] = pool(view)
            vec = vec + _mlp_oracle(padded, p.channel_mlp)
    maps = np.stack(
        [bev.max(axis=0), bev.mean(axis=0), rv.max(axis=0), rv.mean(axis=0)]
    )
    plane = _conv_oracle(maps, p.spatial_conv)
    att = 1.0 / (1.0 + np.exp(-(vec[:, None, None] + plane)))
    return _conv_oracle(np.concatenate([bev, rv]) * att, p.out_conv)


def test_criterion_2_kernel_oracles(capsys):
    with criterion(2, "conv2d / pillarize / rv_to_bev / attention oracles", 30.0, capsys):
        rng = np.random.default_rng(202)
        for _ in range(50):
            cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            k = int(rng.choice([1, 3]))
            p = ConvParams(
                rng.standard_normal((cout, cin, k, k)),
                rng.standard_normal(cout) if rng.random() < 0.5 else None,
                stride=int(rng.choice([1, 2])),
                padding=int(rng.integers(0, 2)),
                dilation=int(rng.choice([1, 2])),
            )
            x = rng.standard_normal((cin, 7, 8))
            assert np.abs(conv2d(x, p) - _conv_oracle(x, p)).max() <= 1e-12

        spec = BevSpec(x_min=-4.0, x_max=4.0, y_min=-4.0, y_max=4.0, cell=0.5)
        for _ in range(50):
            n = int(rng.integers(1, 300))
            xyz = rng.uniform(-5.0, 5.0, (n, 3))
            inten = rng.random(n)
            got = pillarize(xyz, inten, spec)
            assert np.abs(got - _pillar_oracle(xyz, inten, spec)).max() <= 1e-12

        rv = RvSpec(height=8, width=32)
        for _ in range(50):
            n = int(rng.integers(20, 200))
            xyz = rng.uniform(-4.0, 4.0, (n, 3)) * np.array([1.0, 1.0, 0.3])
            img = rv_project(xyz, rng.random(n), rv)
            scale = int(rng.choice([1, 2, 4]))
            feats = rng.standard_normal((3, rv.height // scale, rv.width // scale))
            got = rv_to_bev(feats, img, xyz, spec, reduce="max")
            assert np.abs(got - _rv_to_bev_oracle(feats, img, xyz, spec)).max() <= 1e-12

        for i in range(50):
            c_bev, c_rv = int(rng.integers(2, 6)), int(rng.integers(2, 6))
            p = make_rvbev_attn_params(c_bev, c_rv, int(rng.integers(2, 6)), rng)
            bev = rng.standard_normal((c_bev, 6, 9))
            rvf = rng.standard_normal((c_rv, 6, 9))
            got = rv_bev_attention(bev, rvf, p)
            assert np.abs(got - _attention_oracle(bev, rvf, p)).max() <= 1e-12


# -- 3: finite-difference gradient audit --


def test_criterion_3_gradients(capsys):
    with criterion(3, "analytic gradients within 1e-4 of finite differences", 60.0, capsys):
        worst = {}
        for name, op, x, eps in _gradcheck_cases(20):
            err = grad_check(op, x, epsilon=eps)
            worst[name] = max(worst.get(name, 0.0), err)
        assert set(worst) == {
            "conv2d", "mlp", "sigmoid", "tanh", "relu", "focal", "smooth_l1",
        }
        for name, err in sorted(worst.items()):
            assert err < GRADCHECK_TOL, "%s gradient off by %g" % (name, err)


# -- 4: reversible rearrangement and head encoding --


def test_criterion_4_round_trips(capsys):
    with criterion(4, "depth/space identity and encode -> decode recovery", 10.0, capsys):
        rng = np.random.default_rng(404)
        for _ in range(100):
            c = int(rng.integers(1, 5))
            h = 2 * int(rng.integers(1, 7))
            w = 2 * int(rng.integers(1, 7))
            x = rng.standard_normal((c, h, w))
            back = depth2space(space2depth(x))
            assert np.array_equal(back, x)

        grid = BevSpec()
        for trial in range(20):
            boxes = []
            while len(boxes) < 6:
                cand = Box7(
                    cx=float(rng.uniform(-20, 20)),
                    cy=float(rng.uniform(-20, 20)),
                    cz=float(rng.uniform(-1, 1)),
                    l=float(rng.uniform(1.0, 4.5)),
                    w=float(rng.uniform(0.5, 2.0)),
                    h=float(rng.uniform(0.5, 2.0)),
                    yaw=float(rng.uniform(-3.1, 3.1)),
                    class_id=int(rng.integers(1, 4)),
                )
                if all(
                    math.hypot(cand.cx - b.cx, cand.cy - b.cy) > 6.0 for b in boxes
                ):
                    boxes.append(cand)
            head = encode_boxes(boxes, grid, 3)
            dets = decode(head, grid, k_max=16, score_min=0.05)
            assert len(dets.boxes) == len(boxes)
            for gt in boxes:
                best = min(
                    dets.boxes,
                    key=lambda d: math.hypot(d.cx - gt.cx, d.cy - gt.cy),
                )
                assert math.hypot(best.cx - gt.cx, best.cy - gt.cy) < 1e-9
                assert abs(best.cz - gt.cz) < 1e-9
                assert abs(best.l - gt.l) < 1e-9
                assert abs(best.w - gt.w) < 1e-9
                assert abs(best.h - gt.h) < 1e-9
                assert abs(best.yaw - gt.yaw) < 1e-9
                assert best.class_id == gt.class_id


# -- 5: noise-free guidance behaves exactly --


def test_criterion_5_zero_noise_guidance(capsys):
    with criterion(5, "zero-noise density peaks at centers; CFA identity", 30.0, capsys):
        config = SceneConfig()
        clean = PanopticNoise(eps_sem=0.0, sigma_off=0.0, eps_mask=0.0)
        grid = BevSpec()
        cfa_params = make_cfa_params(4, config.n_classes, np.random.default_rng(5))
        per_class = dict(zip(range(1, config.n_classes + 1), config.points_per_object))
        for s in range(32):
            scene = generate_scene(config, 5000 + s)
            est = oracle_panoptic(scene, clean, 5000 + s)
            density = center_density(scene.xyz, est, grid)
            centers = {center_cell(b, grid) for b in scene.boxes}
            assert None not in centers
            nonzero = {
                (ix, iy)
                for iy, ix in np.argwhere(density.counts > 0)
            }
            # every vote lands exactly in a box's center cell
            assert nonzero == {(cc[0], cc[1]) for cc in centers}
            flat = density.values[0].argmax()
            argmax = (int(flat % grid.cols), int(flat // grid.cols))
            assert argmax in centers
            for box in scene.boxes:
                cc = center_cell(box, grid)
                assert density.counts[cc[1], cc[0]] == per_class[box.class_id]

            x = pillarize(scene.xyz, scene.intensity, grid)
            zeros = [np.zeros((1, grid.rows, grid.cols))] * config.n_classes
            gated = class_foreground_attention(x, zeros, cfa_params)
            assert np.array_equal(gated, x)


# -- 6: evaluation against an independent reference --


def test_criterion_6_ap_reference(capsys):
    import test_metrics as ref

    with criterion(6, "pooled AP equals brute-force reference", 30.0, capsys):
        rng = np.random.default_rng(606)
        for _ in range(200):
            dets, gts = ref._random_scenes(rng, int(rng.integers(1, 3)))
            result = evaluate(dets, gts, 3)
            for k in range(3):
                for t, dist in enumerate(THRESHOLDS):
                    want = ref._ref_ap(dets, gts, k + 1, dist)
                    assert abs(result.ap[k, t] - want) <= 1e-12
        # a perfect detector scores exactly 1.0
        gts = [
            [ref._box(float(i * 3), float(j * 3), 1 + (i + j) % 3) for i in range(4)]
            for j in range(3)
        ]
        perfect = [
            ref._dets([dataclasses.replace(b, score=0.5) for b in scene])
            for scene in gts
        ]
        assert evaluate(perfect, gts, 3).mean_ap == 1.0
        assert match_and_ap(perfect[0], gts[0], 1, 0.5) == 1.0


# -- 7: the guidance stages move the benchmark the right way --


def test_criterion_7_ablation_direction(capsys):
    with criterion(7, "mba and cdh ablation deltas positive over 5 seeds", 300.0, capsys):
        config = synth_v1()
        assert config.workers == 1
        result = ablate(config, seeds=(0, 1, 2, 3, 4))
        by_name = {row.name: row for row in result.rows}
        mba = by_name["+mba"]
        cdh = by_name["+mba+cfa+cdh"]
        with capsys.disabled():
            for row in result.rows[1:]:
                print(
                    "  %-13s mean delta %+0.4f  per seed: %s"
                    % (
                        row.name,
                        row.delta,
                        " ".join("%+0.4f" % d for d in row.per_seed_delta),
                    )
                )
        assert mba.delta > 0.0, "mba mean delta %+0.5f" % mba.delta
        assert cdh.delta > 0.0, "cdh mean delta %+0.5f" % cdh.delta


# -- 8: byte-identical reruns, any worker count --


def test_criterion_8_byte_determinism(tmp_path, capsys):
    with criterion(8, "rerun and worker-count byte identity", 120.0, capsys):
        config = RunConfig(
            scene=SceneConfig(objects_per_class=(2, 2, 2)),
            toggles=Toggles(mba=True, cfa=True, cdh=True),
            n_scenes=16,
            seed=3,
        )
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(config_to_dict(config)))
        outputs = []
        for name, workers in (("a", 1), ("b", 1), ("c", 8)):
            out = str(tmp_path / name)
            code = main(
                [
                    "run",
                    "--config",
                    str(cfg_path),
                    "--workers",
                    str(workers),
                    "--out",
                    out,
                ]
            )
            assert code == 0
            with open(os.path.join(out, "metrics.json"), "r", encoding="utf-8") as f:
                metrics = "\n".join(
                    ln for ln in f.read().splitlines() if '"generated_at"' not in ln
                )
            with open(os.path.join(out, "detections.csv"), "rb") as f:
                dets = f.read()
            outputs.append((metrics, dets))
        assert outputs[0] == outputs[1] == outputs[2]

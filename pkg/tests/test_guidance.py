"""Guidance tests: RV/BEV attention against a recomposed oracle, the
class-foreground skip path's bit-exactness, and the center density map's
closed-form values."""

import numpy as np
import pytest

from pgfusion import tensorops as T
from pgfusion.guidance import (
    DensityHeatmap,
    apply_density,
    center_density,
    class_foreground_attention,
    make_cfa_params,
    make_rvbev_attn_params,
    rv_bev_attention,
)
from pgfusion.projection import BevSpec, bev_bin
from pgfusion.scene import PanopticEstimate, PanopticNoise, SceneConfig, generate_scene, oracle_panoptic


def conv_loops(x, p):
    """Reference convolution: plain nested loops, no shared code path."""
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
                            acc += (
                                w[o, i, ky, kx]
                                * xp[i, oy * stride + ky * dil, ox * stride + kx * dil]
                            )
                out[o, oy, ox] = acc
        if p.bias is not None:
            out[o] += p.bias[o]
    return out


def mlp_loops(v, p):
    hidden = np.maximum(p.w1 @ v + p.b1, 0.0)
    return p.w2 @ hidden + p.b2


def attention_oracle(bev, rv, p):
    c_bev = bev.shape[0]
    c_total = c_bev + rv.shape[0]
    vec = np.zeros(c_total)
    for off, view in ((0, bev), (c_bev, rv)):
        for pool in (lambda a: a.max(axis=(1, 2)), lambda a: a.mean(axis=(1, 2))):
            padded = np.zeros(c_total)
            padded[off : off + view.shape[0]] = pool(view)
            vec = vec + mlp_loops(padded, p.channel_mlp)
    maps = np.stack([bev.max(axis=0), bev.mean(axis=0), rv.max(axis=0), rv.mean(axis=0)])
    plane = conv_loops(maps, p.spatial_conv)
    att = 1.0 / (1.0 + np.exp(-(vec[:, None, None] + plane)))
    gated = np.concatenate([bev, rv]) * att
    return conv_loops(gated, p.out_conv)


def fake_panoptic(offsets, mask):
    return PanopticEstimate(
        class_probs=np.zeros((len(mask), 2)),
        foreground_mask=np.asarray(mask, dtype=bool),
        center_offsets=np.asarray(offsets, dtype=np.float64),
        rv_feats={},
    )


def rational_density(n):
    return ((n + 1.0) ** 2 - 1.0) / ((n + 1.0) ** 2 + 1.0)


class TestRvBevAttention:
    def test_against_composition_oracle(self):
        for seed in range(6):
            rng = np.random.default_rng(500 + seed)
            bev = rng.standard_normal((6, 8, 10))
            rv = rng.standard_normal((4, 8, 10))
            p = make_rvbev_attn_params(6, 4, 5, rng)
            got = rv_bev_attention(bev, rv, p)
            want = attention_oracle(bev, rv, p)
            assert got.shape == (5, 8, 10)
            assert np.max(np.abs(got - want)) < 1e-12

    def test_spatial_conv_is_dilated_same_size(self):
        p = make_rvbev_attn_params(6, 4, 5, np.random.default_rng(0))
        s = p.spatial_conv
        assert s.dilation == 3
        assert s.padding == 3
        assert s.weights.shape == (1, 4, 3, 3)

    def test_rejects_mismatched_shapes(self):
        rng = np.random.default_rng(1)
        p = make_rvbev_attn_params(6, 4, 5, rng)
        with pytest.raises(ValueError, match="spatial"):
            rv_bev_attention(np.zeros((6, 8, 10)), np.zeros((4, 8, 9)), p)
        with pytest.raises(ValueError, match="channels"):
            rv_bev_attention(np.zeros((5, 8, 10)), np.zeros((4, 8, 10)), p)


class TestClassForegroundAttention:
    def test_zero_probs_bit_identical(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((6, 5, 7))
        x[0, 0, 0] = -0.0
        x[1, 2, 3] = 0.0
        p = make_cfa_params(6, 3, rng)
        probs = [np.zeros((1, 5, 7))] * 3
        out = class_foreground_attention(x, probs, p)
        assert np.array_equal(out, x)
        assert np.array_equal(np.signbit(out), np.signbit(x))

    def test_against_composition_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 5, 7))
        p = make_cfa_params(6, 2, rng)
        probs = [rng.uniform(0, 1, (1, 5, 7)) for _ in range(2)]
        got = class_foreground_attention(x, probs, p)
        branches = [conv_loops(x * pb, conv) for pb, conv in zip(probs, p.branch_convs)]
        delta = conv_loops(np.concatenate(branches), p.merge_conv)
        want = x + delta
        assert np.max(np.abs(got - want)) < 1e-12

    def test_validation(self):
        rng = np.random.default_rng(4)
        x = np.zeros((6, 5, 7))
        p = make_cfa_params(6, 2, rng)
        with pytest.raises(ValueError, match="probability maps"):
            class_foreground_attention(x, [np.zeros((1, 5, 7))], p)
        with pytest.raises(ValueError, match="shape"):
            class_foreground_attention(x, [np.zeros((1, 5, 7)), np.zeros((1, 5, 6))], p)
        bad = [np.zeros((1, 5, 7)), np.full((1, 5, 7), 1.5)]
        with pytest.raises(ValueError, match="outside"):
            class_foreground_attention(x, bad, p)

    def test_param_validation(self):
        rng = np.random.default_rng(5)
        with pytest.raises(ValueError, match="bias-free"):
            from pgfusion.guidance import CfaParams

            CfaParams(
                (T.ConvParams(np.zeros((3, 6, 1, 1)), np.zeros(3)),),
                T.ConvParams(np.zeros((6, 3, 1, 1)), None),
            )


class TestCenterDensity:
    GRID = BevSpec(x_min=0.0, x_max=4.0, y_min=0.0, y_max=4.0, cell=1.0)

    def test_hand_counts_and_rational_values(self):
        # cell (0, 0) gets 3 points, cell (2, 1) gets 1, one point shifts
        # off-grid and one is background
        xyz = np.array(
            [
                [0.2, 0.2, 0.0],
                [0.7, 0.1, 0.0],
                [3.0, 3.0, 0.0],
                [0.5, 2.5, 0.0],
                [1.0, 1.0, 0.0],
                [2.0, 2.0, 0.0],
            ]
        )
        offsets = np.array(
            [
                [0.3, 0.3, 0.0],
                [-0.2, 0.4, 0.0],
                [-2.5, -2.5, 0.0],
                [1.0, -0.4, 0.0],
                [9.0, 0.0, 0.0],
                [0.0, 0.0, 0.0],
            ]
        )
        mask = np.array([True, True, True, True, True, False])
        h = center_density(xyz, fake_panoptic(offsets, mask), self.GRID)
        assert h.counts.sum() == 4
        assert h.counts[0, 0] == 3
        assert h.counts[2, 1] == 1
        assert h.values.shape == (1, 4, 4)
        assert h.values[0, 0, 0] == pytest.approx(rational_density(3), abs=1e-12)
        # one point gives exactly 0.6 and empty cells exactly 0
        assert h.values[0, 2, 1] == 0.6
        assert np.count_nonzero(h.values) == 2

    def test_zero_noise_scene_centers(self):
        scene = generate_scene(SceneConfig(), seed=21)
        est = oracle_panoptic(scene, PanopticNoise(), seed=0)
        grid = BevSpec()
        h = center_density(scene.xyz, est, grid)
        for j, box in enumerate(scene.boxes):
            ix, iy, inb = bev_bin(np.array([[box.cx, box.cy, box.cz]]), grid)
            assert inb[0]
            n_inst = int((scene.instance_id == j + 1).sum())
            # with exact offsets every instance point lands in the center cell
            assert h.counts[iy[0], ix[0]] == n_inst
            assert h.values[0, iy[0], ix[0]] == pytest.approx(
                rational_density(n_inst), abs=1e-12
            )

    def test_values_in_unit_interval(self):
        xyz = np.tile(np.array([[1.5, 1.5, 0.0]]), (100000, 1))
        pan = fake_panoptic(np.zeros((100000, 3)), np.ones(100000, dtype=bool))
        h = center_density(xyz, pan, self.GRID)
        assert h.counts[1, 1] == 100000
        v = h.values[0, 1, 1]
        assert 0.0 < v < 1.0
        assert v == pytest.approx(rational_density(100000), abs=1e-12)


class TestApplyDensity:
    def test_zero_heatmap_bit_identical(self):
        x = np.random.default_rng(6).standard_normal((4, 3, 5))
        x[0, 0, 0] = -0.0
        out = apply_density(x, np.zeros((1, 3, 5)))
        assert np.array_equal(out, x)
        assert np.array_equal(np.signbit(out), np.signbit(x))

    def test_boost_formula(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 3, 5))
        h = rng.uniform(0, 1, (1, 3, 5))
        out = apply_density(x, h)
        np.testing.assert_allclose(out, x * (1.0 + h), rtol=1e-15, atol=0)

    def test_accepts_heatmap_object(self):
        grid = BevSpec(x_min=0.0, x_max=3.0, y_min=0.0, y_max=3.0, cell=1.0)
        hm = DensityHeatmap(
            grid=grid, values=np.full((1, 3, 3), 0.5), counts=np.ones((3, 3), dtype=np.int64)
        )
        x = np.ones((2, 3, 3))
        assert np.array_equal(apply_density(x, hm), np.full((2, 3, 3), 1.5))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="shape"):
            apply_density(np.ones((2, 3, 3)), np.zeros((1, 3, 4)))

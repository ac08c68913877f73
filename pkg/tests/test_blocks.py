from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detkit import tensor as T
from detkit.blocks import (
    Bottleneck,
    C2fBlock,
    ConvBlock,
    EMABlock,
    SPPFBlock,
    c2f_ema,
    c2f_ema_forward,
    c2f_forward,
    ema_forward,
    init_params,
    parameters,
    sppf_forward,
)
from detkit.tensor import DimensionError


def rand(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def identity_conv(c):
    w = np.eye(c).reshape(c, c, 1, 1)
    z = np.zeros(c)
    return ConvBlock(w, z, z, np.ones(c), np.ones(c), z, act="identity", eps=1e-12)


def bypass_gates(ema: EMABlock) -> EMABlock:
    """Weights that force every sigmoid gate to exactly 1.0."""
    return replace(
        ema,
        w1x1=np.zeros_like(ema.w1x1),
        b1x1=np.full_like(ema.b1x1, 1e3),
        w3x3=np.zeros_like(ema.w3x3),
        b3x3=np.full_like(ema.b3x3, 1e3),
    )


def ema_reference(block: EMABlock, x: np.ndarray) -> np.ndarray:
    """Per-sample, per-group loop version of the attention dataflow."""
    n, c, h, w = x.shape
    g = block.groups
    cg = c // g
    out = np.empty_like(x)
    sig = lambda t: 1.0 / (1.0 + np.exp(-t))  # noqa: E731
    w1 = block.w1x1[:, :, 0, 0]
    for b in range(n):
        for gi in range(g):
            xs = x[b, gi * cg : (gi + 1) * cg]  # (cg, H, W)
            xh = xs.mean(axis=2)  # (cg, H)
            xw = xs.mean(axis=1)  # (cg, W)
            gh = sig(w1 @ xh + block.b1x1[:, None])
            gw = sig(w1 @ xw + block.b1x1[:, None])
            x1 = xs * gh[:, :, None] * gw[:, None, :]
            xp = np.pad(xs, ((0, 0), (1, 1), (1, 1)))
            x2 = np.empty_like(xs)
            for o in range(cg):
                for i in range(h):
                    for j in range(w):
                        x2[o, i, j] = np.sum(xp[:, i : i + 3, j : j + 3] * block.w3x3[o]) + block.b3x3[o]
            s1 = np.exp(x1.mean(axis=(1, 2)) - x1.mean(axis=(1, 2)).max())
            s1 /= s1.sum()
            s2 = np.exp(x2.mean(axis=(1, 2)) - x2.mean(axis=(1, 2)).max())
            s2 /= s2.sum()
            m = np.tensordot(s1, x2, axes=1) + np.tensordot(s2, x1, axes=1)
            out[b, gi * cg : (gi + 1) * cg] = xs * sig(m)[None]
    return out


class TestInit:
    def test_same_seed_bit_identical(self):
        a = parameters(init_params("c2f_ema", seed=3, c_in=16, c_out=16))
        b = parameters(init_params("c2f_ema", seed=3, c_in=16, c_out=16))
        assert len(a) == len(b) and all(np.array_equal(p, q) for p, q in zip(a, b))

    def test_different_seed_differs(self):
        a = parameters(init_params("conv", seed=1, c_in=4, c_out=4, k=3))
        b = parameters(init_params("conv", seed=2, c_in=4, c_out=4, k=3))
        assert any(not np.array_equal(p, q) for p, q in zip(a, b))

    def test_ema_divisibility(self):
        assert init_params("ema", channels=64, groups=8).groups == 8
        with pytest.raises(DimensionError):
            init_params("ema", channels=64, groups=7)

    def test_fan_in_bound(self):
        conv = ConvBlock.create(8, 4, 3, seed=0)
        assert np.max(np.abs(conv.weight)) <= 1 / np.sqrt(8 * 9)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            init_params("transformer")


class TestConvBlock:
    def test_composition(self):
        conv = ConvBlock.create(3, 5, 3, seed=1)
        x = rand((2, 3, 6, 6))
        y = T.conv2d(x, conv.weight, conv.bias, padding=1)
        y = (y - conv.bn_mean[None, :, None, None]) / np.sqrt(conv.bn_var + conv.eps)[None, :, None, None]
        y = y * conv.bn_gamma[None, :, None, None] + conv.bn_beta[None, :, None, None]
        np.testing.assert_allclose(conv(x), y / (1 + np.exp(-y)), rtol=1e-12)

    def test_strided_halves(self):
        assert ConvBlock.create(3, 4, 3, 2, seed=0)(rand((1, 3, 8, 8))).shape == (1, 4, 4, 4)

    def test_bn_length_checked(self):
        conv = ConvBlock.create(2, 3)
        with pytest.raises(DimensionError):
            replace(conv, bn_mean=np.zeros(2))


class TestC2f:
    def test_shape(self):
        blk = init_params("c2f", c_in=64, c_out=64)
        assert c2f_forward(blk, rand((1, 64, 40, 40))).shape == (1, 64, 40, 40)

    def test_exit_conv_width(self):
        blk = C2fBlock.create(8, 16, n=3)
        assert blk.cv2.c_in == (2 + 3) * blk.hidden

    def test_n0_is_entry_then_exit(self):
        blk = C2fBlock.create(6, 8, n=0, seed=2)
        x = rand((1, 6, 5, 5))
        np.testing.assert_array_equal(blk(x), blk.cv2(blk.cv1(x)))

    def test_zero_bottleneck_is_residual_identity(self):
        blk = C2fBlock.create(8, 8, n=2, shortcut=True, seed=4)
        zeroed = replace(blk, bottlenecks=tuple(replace(m, cv1=m.cv1.zeroed(), cv2=m.cv2.zeroed()) for m in blk.bottlenecks))
        stages = zeroed.stages(rand((1, 8, 6, 6)))
        np.testing.assert_array_equal(stages[2], stages[1])
        np.testing.assert_array_equal(stages[3], stages[1])

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            C2fBlock.create(8, 8)(rand((1, 4, 4, 4)))


class TestSPPF:
    def test_shape(self):
        blk = SPPFBlock.create(256, 128, seed=0)
        assert sppf_forward(blk, rand((1, 256, 20, 20))).shape == (1, 128, 20, 20)

    def test_constant_input_groups_equal(self):
        blk = SPPFBlock.create(4, 4, seed=1)
        pyr = blk.pyramid(np.full((1, 4, 7, 7), 0.3))
        for p in pyr[1:]:
            np.testing.assert_array_equal(p, pyr[0])

    def test_scaling_with_identity_entry(self):
        blk = SPPFBlock(identity_conv(3), ConvBlock.create(12, 2), 5)
        x = np.abs(rand((1, 3, 9, 9), 2))
        for a, b in zip(blk.pyramid(2 * x), blk.pyramid(x)):
            np.testing.assert_array_equal(a, 2 * b)

    def test_pools_cascade(self):
        blk = SPPFBlock(identity_conv(2), ConvBlock.create(8, 2), 5)
        x = rand((1, 2, 12, 12), 3)
        pyr = blk.pyramid(x)
        # three stride-1 k=5 pools equal one k=13 pool (max is associative)
        np.testing.assert_array_equal(pyr[3], T.pool(pyr[0], "max2d", kernel=13, stride=1, padding=6))


class TestEMA:
    @settings(max_examples=25, deadline=None)
    @given(
        st.integers(1, 2),
        st.sampled_from([(8, 1), (8, 2), (8, 4), (8, 8), (12, 3), (16, 4), (6, 6)]),
        st.integers(1, 6),
        st.integers(1, 6),
        st.integers(0, 99),
    )
    def test_shape_and_softmax(self, n, cg_pair, h, w, seed):
        c, g = cg_pair
        blk = EMABlock.create(c, g, seed=seed)
        x = rand((n, c, h, w), seed)
        y, parts = blk.forward(x, return_parts=True)
        assert y.shape == x.shape
        for key in ("softmax_1x1", "softmax_3x3"):
            np.testing.assert_allclose(parts[key].sum(axis=-1), 1.0, atol=1e-9)
        for key in ("gate_h", "gate_w", "spatial_gate"):
            assert np.all((parts[key] > 0) & (parts[key] < 1))

    def test_wide_input_shape(self):
        blk = EMABlock.create(64, 8, seed=0)
        assert ema_forward(blk, rand((2, 64, 40, 40))).shape == (2, 64, 40, 40)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_loop_reference(self, seed):
        blk = EMABlock.create(12, 3, seed=seed)
        x = rand((2, 12, 5, 4), seed)
        np.testing.assert_allclose(blk(x), ema_reference(blk, x), rtol=1e-12, atol=1e-13)

    def test_constant_input_maps_uniform(self):
        blk = EMABlock.create(8, 2, seed=5)
        _, parts = blk.forward(np.full((1, 8, 6, 6), 0.7), return_parts=True)
        m3 = parts["map_3x3"]  # built from the gated 1x1 branch: uniform everywhere
        np.testing.assert_allclose(m3, np.broadcast_to(m3[..., :1, :1], m3.shape), rtol=1e-14)
        interior = parts["map_1x1"][..., 1:-1, 1:-1]  # 3x3 branch sees zero padding at the border
        np.testing.assert_allclose(interior, np.broadcast_to(interior[..., :1, :1], interior.shape), rtol=1e-14)

    def test_channel_check(self):
        with pytest.raises(DimensionError):
            EMABlock.create(8, 2)(rand((1, 12, 3, 3)))

    def test_deterministic(self):
        blk = EMABlock.create(16, 4, seed=9)
        x = rand((1, 16, 7, 7))
        assert np.array_equal(blk(x), blk(x.copy()))


class TestC2fEMA:
    def test_shape_matches_plain(self):
        x = rand((1, 16, 10, 10))
        assert c2f_ema_forward(c2f_ema(16, 32, groups=8), x).shape == C2fBlock.create(16, 32)(x).shape

    @pytest.mark.parametrize("n,shortcut", [(1, False), (1, True), (2, True)])
    def test_gate_bypass_equals_plain(self, n, shortcut):
        blk = c2f_ema(8, 16, n=n, shortcut=shortcut, groups=4, seed=11)
        bypassed = replace(blk, bottlenecks=tuple(replace(m, ema=bypass_gates(m.ema)) for m in blk.bottlenecks))
        plain = replace(blk, bottlenecks=tuple(replace(m, ema=None) for m in blk.bottlenecks))
        x = rand((2, 8, 6, 6), 1)
        np.testing.assert_allclose(bypassed(x), c2f_forward(plain, x), rtol=0, atol=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_finite(self, seed):
        rng = np.random.default_rng(seed)
        c = int(rng.choice([8, 16]))
        blk = c2f_ema(c, c, n=int(rng.integers(1, 3)), groups=4, seed=seed)
        assert np.all(np.isfinite(blk(rng.normal(scale=5, size=(1, c, 6, 6)))))

    def test_rejects_block_without_ema(self):
        with pytest.raises(ValueError):
            c2f_ema_forward(C2fBlock.create(8, 8), rand((1, 8, 4, 4)))


def test_batch_and_spatial_preserved():
    x = rand((3, 8, 5, 7))
    for blk in (Bottleneck.create(8), C2fBlock.create(8, 8), SPPFBlock.create(8, 8), EMABlock.create(8, 4)):
        assert blk(x).shape[0] == 3 and blk(x).shape[2:] == (5, 7)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from detkit import tensor as T
from detkit.tensor import DimensionError

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def naive_conv(x, w, b, stride, pad, groups):
    """Loop-level cross-correlation used as the reference."""
    n, c, h, wd = x.shape
    co, cig, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    per = co // groups
    for ni in range(n):
        for o in range(co):
            g = o // per
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, g * cig : (g + 1) * cig, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[ni, o, i, j] = np.sum(patch * w[o]) + (b[o] if b is not None else 0.0)
    return out


class TestConv:
    def test_identity_kernel(self):
        x = np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3)
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1
        assert np.array_equal(T.conv2d(x, k, padding=1), x)

    def test_output_size_stride2(self):
        y = T.conv2d(np.random.default_rng(0).normal(size=(1, 1, 4, 4)), np.ones((1, 1, 3, 3)), stride=2, padding=1)
        assert y.shape == (1, 1, 2, 2)

    def test_hand_sum(self):
        assert T.conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2))).item() == 4.0

    def test_no_kernel_flip(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 0, 0] = 1.0
        k = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
        # top-left impulse seen by the window centred at (1,1) hits weight k[0,0]
        assert T.conv2d(x, k)[0, 0, 0, 0] == k[0, 0, 0, 0]

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(1, 2),
        st.sampled_from([1, 2]),
        st.integers(1, 3),
        st.integers(3, 7),
        st.sampled_from([1, 3]),
        st.integers(1, 2),
        st.integers(0, 1),
        st.integers(0, 10_000),
    )
    def test_matches_loop_reference(self, n, groups, cpg, hw, k, stride, pad, seed):
        rng = np.random.default_rng(seed)
        c_in, c_out = groups * cpg, groups * 2
        x = rng.normal(size=(n, c_in, hw, hw))
        w = rng.normal(size=(c_out, cpg, k, k))
        b = rng.normal(size=c_out)
        got = T.conv2d(x, w, b, stride=stride, padding=pad, groups=groups)
        np.testing.assert_allclose(got, naive_conv(x, w, b, stride, pad, groups), rtol=1e-12, atol=1e-12)

    def test_group_mismatch_names_axis(self):
        with pytest.raises(DimensionError) as e:
            T.conv2d(np.zeros((1, 3, 4, 4)), np.zeros((2, 1, 1, 1)), groups=2)
        assert e.value.axes

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(np.zeros((1, 3, 4, 4)), np.zeros((2, 2, 1, 1)))

    def test_bad_stride(self):
        with pytest.raises(DimensionError):
            T.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 1, 1)), stride=0)


class TestPool:
    def test_global_avg_constant(self):
        y = T.pool(np.ones((1, 3, 4, 4)), "global_avg2d")
        assert y.shape == (1, 3, 1, 1) and np.all(y == 1.0)

    def test_avg_along_w_is_row_mean(self):
        x = np.arange(12, dtype=float).reshape(1, 2, 2, 3)
        y = T.pool(x, "avg_along_w")
        assert y.shape == (1, 2, 2, 1)
        np.testing.assert_array_equal(y[..., 0], x.mean(axis=3))

    def test_avg_along_h(self):
        x = np.arange(12, dtype=float).reshape(1, 2, 2, 3)
        y = T.pool(x, "avg_along_h")
        assert y.shape == (1, 2, 1, 3)
        np.testing.assert_array_equal(y[:, :, 0], x.mean(axis=2))

    def test_max2d_preserves_and_dominates(self):
        x = np.random.default_rng(1).normal(size=(1, 1, 8, 8))
        y = T.pool(x, "max2d", kernel=5, stride=1, padding=2)
        assert y.shape == x.shape and np.all(y >= x)

    def test_max2d_brute_force(self):
        x = np.random.default_rng(2).normal(size=(2, 3, 6, 5))
        y = T.pool(x, "max2d", kernel=3, stride=2, padding=1)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
        for i in range(y.shape[2]):
            for j in range(y.shape[3]):
                np.testing.assert_array_equal(y[:, :, i, j], xp[:, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3].max(axis=(2, 3)))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.pool(np.zeros((1, 1, 2, 2)), "median")

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            T.pool(np.zeros((1, 1, 2, 2)), "max2d", kernel=5, stride=1, padding=0)


class TestActivations:
    def test_fixed_points(self):
        assert T.activation(np.array(0.0), "sigmoid") == 0.5
        assert T.activation(np.array(0.0), "silu") == 0.0

    @given(arrays(np.float64, 16, elements=st.floats(-700, 700)))
    def test_sigmoid_symmetry_and_range(self, t):
        s = T.sigmoid(t)
        np.testing.assert_allclose(s + T.sigmoid(-t), 1.0, atol=1e-15)
        assert np.all((s >= 0) & (s <= 1)) and np.all(np.isfinite(s))

    @given(arrays(np.float64, 8, elements=finite))
    def test_silu_definition(self, t):
        np.testing.assert_allclose(T.activation(t, "silu"), t / (1 + np.exp(-t)), rtol=1e-12, atol=1e-300)

    def test_sigmoid_extreme_is_finite(self):
        assert np.all(np.isfinite(T.sigmoid(np.array([-1e6, 1e6]))))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax(np.array([0.0, 0.0]), 0), [0.5, 0.5])

    def test_ln2(self):
        np.testing.assert_allclose(T.softmax(np.array([math.log(2), 0.0]), 0), [2 / 3, 1 / 3], rtol=1e-15)

    @settings(max_examples=50)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 3)), elements=finite),
           st.integers(0, 2), finite)  # fmt: skip
    def test_slices_sum_to_one_and_shift_invariant(self, x, axis, c):
        s = T.softmax(x, axis)
        np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-9)
        assert np.all(s > 0)
        np.testing.assert_allclose(T.softmax(x + c, axis), s, atol=1e-12)

    def test_large_logits_stable(self):
        assert np.all(np.isfinite(T.softmax(np.array([1e4, 0.0]), 0)))

    def test_bad_axis(self):
        with pytest.raises(DimensionError):
            T.softmax(np.zeros((2, 2)), 5)


class TestReshape:
    def test_concat_split_inverse(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(1, 3, 2, 2)), rng.normal(size=(1, 3, 2, 2))
        c = T.concat([a, b], axis=1)
        assert c.shape == (1, 6, 2, 2)
        a2, b2 = T.split(c, 2, axis=1)
        assert np.array_equal(a, a2) and np.array_equal(b, b2)

    @given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 1000))
    def test_split_concat_property(self, sizes, seed):
        parts = [np.random.default_rng(seed + i).normal(size=(2, s, 3, 3)) for i, s in enumerate(sizes)]
        back = T.split(T.concat(parts, axis=1), sizes, axis=1)
        assert all(np.array_equal(p, q) for p, q in zip(parts, back))

    def test_upsample(self):
        y = T.upsample_nearest(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2)
        expect = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        np.testing.assert_array_equal(y[0, 0], expect)

    def test_matmul_hand(self):
        a = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        b = np.array([[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]])
        np.testing.assert_array_equal(T.matmul(a, b), [[58.0, 64.0], [139.0, 154.0]])

    def test_transpose_default_swaps_last_two(self):
        x = np.arange(24.0).reshape(1, 2, 3, 4)
        assert T.transpose(x).shape == (1, 2, 4, 3)

    def test_errors(self):
        with pytest.raises(DimensionError):
            T.concat([np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 2))], axis=1)
        with pytest.raises(DimensionError):
            T.split(np.zeros((1, 5, 2, 2)), 2, axis=1)
        with pytest.raises(DimensionError):
            T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            T.upsample_nearest(np.zeros((1, 1, 2, 2)), 0)


class TestBatchNorm:
    def test_identity(self):
        x = np.random.default_rng(4).normal(size=(2, 3, 4, 4))
        y = T.batch_norm_inference(x, np.zeros(3), np.ones(3), np.ones(3), np.zeros(3), eps=1e-12)
        np.testing.assert_allclose(y, x, rtol=1e-11)

    def test_gamma_zero_gives_beta(self):
        x = np.random.default_rng(5).normal(size=(1, 3, 2, 2))
        beta = np.array([1.0, -2.0, 3.0])
        y = T.batch_norm_inference(x, np.zeros(3), np.ones(3), np.zeros(3), beta)
        np.testing.assert_array_equal(y, np.broadcast_to(beta[None, :, None, None], x.shape))

    def test_centering(self):
        x = np.full((1, 2, 3, 3), 7.0)
        y = T.batch_norm_inference(x, np.array([7.0, 7.0]), np.ones(2), np.ones(2), np.zeros(2))
        assert np.all(y == 0.0)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            T.batch_norm_inference(np.zeros((1, 3, 2, 2)), np.zeros(2), np.ones(3), np.ones(3), np.zeros(3))


def test_deterministic():
    rng = np.random.default_rng(6)
    x, w = rng.normal(size=(1, 4, 9, 9)), rng.normal(size=(4, 4, 3, 3))
    assert np.array_equal(T.conv2d(x, w, padding=1), T.conv2d(x.copy(), w.copy(), padding=1))

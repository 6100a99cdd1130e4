import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layermask import tensor as T
from layermask.errors import NumericalError

F32 = np.float32


def chw(data):
    return np.asarray(data, dtype=F32)


def brute_maxpool(x, k, s, p):
    """Window-by-window enumeration with 0-valued padding."""
    c, h, w = x.shape
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    out = np.empty((c, ho, wo), dtype=F32)
    for ci in range(c):
        for i in range(ho):
            for j in range(wo):
                out[ci, i, j] = xp[ci, i * s : i * s + k, j * s : j * s + k].max()
    return out


class TestConv2d:
    def test_scalar_kernel_doubles(self):
        x = chw([[[1, 2], [3, 4]]])
        w = chw([[[[2]]]])
        spec = T.ConvSpec(1, 1, 1)
        assert np.array_equal(T.conv2d(x, w, None, spec), chw([[[2, 4], [6, 8]]]))

    def test_full_overlap_sum(self):
        x = np.ones((1, 3, 3), dtype=F32)
        w = np.ones((1, 1, 3, 3), dtype=F32)
        out = T.conv2d(x, w, None, T.ConvSpec(1, 1, 3))
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == 9.0

    def test_zero_input_yields_bias(self):
        x = np.zeros((2, 4, 4), dtype=F32)
        w = np.ones((3, 2, 3, 3), dtype=F32)
        b = chw([0.5, -1.0, 2.0])
        out = T.conv2d(x, w, b, T.ConvSpec(3, 2, 3, zero_padding=1))
        for o in range(3):
            assert np.all(out[o] == b[o])

    def test_shape_mismatch_rejected(self):
        x = np.zeros((2, 4, 4), dtype=F32)
        w = np.zeros((1, 3, 3, 3), dtype=F32)
        with pytest.raises(ValueError):
            T.conv2d(x, w, None, T.ConvSpec(1, 3, 3))

    def test_output_too_small_rejected(self):
        x = np.zeros((1, 2, 2), dtype=F32)
        w = np.zeros((1, 1, 3, 3), dtype=F32)
        with pytest.raises(ValueError):
            T.conv2d(x, w, None, T.ConvSpec(1, 1, 3))

    def test_nonfinite_output_rejected(self):
        x = np.full((1, 2, 2), 3e38, dtype=F32)
        w = np.full((1, 1, 1, 1), 3e38, dtype=F32)
        with np.errstate(over="ignore"), pytest.raises(NumericalError):
            T.conv2d(x, w, None, T.ConvSpec(1, 1, 1))

    @given(st.integers(1, 3), st.integers(1, 2), st.integers(0, 2), st.integers(42, 52))
    def test_deterministic_repeat(self, c, o, p, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((c, 6, 6)).astype(F32)
        k = 3
        w = rng.standard_normal((o, c, k, k)).astype(F32)
        spec = T.ConvSpec(o, c, k, zero_padding=p)
        assert np.array_equal(T.conv2d(x, w, None, spec), T.conv2d(x, w, None, spec))

    @given(st.integers(0, 200))
    def test_delta_kernel_is_identity(self, seed):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(1, 4))
        k = int(rng.choice([1, 3, 5]))
        h = int(rng.integers(k, k + 5))
        x = rng.uniform(-2, 2, (c, h, h)).astype(F32)
        w = np.zeros((c, c, k, k), dtype=F32)
        for i in range(c):
            w[i, i, k // 2, k // 2] = 1.0
        spec = T.ConvSpec(c, c, k, stride=1, zero_padding=(k - 1) // 2)
        assert np.array_equal(T.conv2d(x, w, None, spec), x)

    @given(st.integers(0, 100), st.floats(-3, 3), st.floats(-3, 3))
    def test_linearity(self, seed, alpha, beta):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-2, 2, (2, 5, 5)).astype(F32)
        y = rng.uniform(-2, 2, (2, 5, 5)).astype(F32)
        w = rng.uniform(-1, 1, (3, 2, 3, 3)).astype(F32)
        spec = T.ConvSpec(3, 2, 3, zero_padding=1)
        a, b = F32(alpha), F32(beta)
        lhs = T.conv2d(a * x + b * y, w, None, spec)
        rhs = a * T.conv2d(x, w, None, spec) + b * T.conv2d(y, w, None, spec)
        tol = 1e-5 * max(1.0, float(np.abs(rhs).max()))
        assert float(np.abs(lhs - rhs).max()) <= tol


class TestMaxPool:
    def test_single_window(self):
        x = chw([[[1, 0], [0, 0]]])
        assert np.array_equal(T.maxpool2d(x, 2, 2), chw([[[1]]]))

    def test_kernel_one_identity(self):
        x = chw([[[1, 2], [3, 4]]])
        assert np.array_equal(T.maxpool2d(x, 1, 1), x)

    def test_padded_windows_enumerated(self):
        x = chw([[[5, 1], [1, 1]]])
        out = T.maxpool2d(x, 2, 1, 1)
        assert out.shape == (1, 3, 3)
        assert np.array_equal(out, brute_maxpool(x, 2, 1, 1))
        # every window that covers cell (0,0) sees the 5
        assert np.array_equal(out[0], chw([[5, 5, 1], [5, 5, 1], [1, 1, 1]])[()])

    @given(st.integers(0, 100), st.integers(1, 3), st.integers(1, 2), st.integers(0, 2))
    def test_matches_window_enumeration(self, seed, k, s, p):
        if p >= k:
            p = k - 1
        rng = np.random.default_rng(seed)
        x = rng.uniform(0, 4, (2, 6, 7)).astype(F32)
        assert np.array_equal(T.maxpool2d(x, k, s, p), brute_maxpool(x, k, s, p))

    @given(st.integers(0, 100))
    def test_bounded_by_input_max(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0, 5, (1, 6, 6)).astype(F32)
        out = T.maxpool2d(x, 3, 2, 1)
        assert out.max() <= x.max()
        assert out.min() >= 0.0


class TestElementwise:
    def test_relu(self):
        assert np.array_equal(T.relu(chw([[[-1, 2]]])), chw([[[0, 2]]]))

    def test_batchnorm_identity_params(self):
        x = np.random.default_rng(1).standard_normal((2, 3, 3)).astype(F32)
        ones, zeros = np.ones(2, dtype=F32), np.zeros(2, dtype=F32)
        out = T.batchnorm_infer(x, ones, zeros, zeros, ones, 0.0)
        assert np.array_equal(out, x)

    @given(st.integers(0, 100))
    def test_batchnorm_invertible(self, seed):
        rng = np.random.default_rng(seed)
        c = 3
        x = rng.uniform(-2, 2, (c, 4, 4)).astype(F32)
        gamma = rng.uniform(0.5, 2.0, c).astype(F32)
        beta = rng.uniform(-1, 1, c).astype(F32)
        mean = rng.uniform(-1, 1, c).astype(F32)
        var = rng.uniform(0.5, 2.0, c).astype(F32)
        eps = F32(1e-5)
        y = T.batchnorm_infer(x, gamma, beta, mean, var, eps)
        inv = np.sqrt(var + eps)
        back = (y - beta[:, None, None]) / gamma[:, None, None] * inv[:, None, None] \
            + mean[:, None, None]
        assert np.allclose(back, x, rtol=1e-5, atol=1e-5)

    def test_hadamard_ones_is_identity(self):
        x = np.random.default_rng(2).standard_normal((3, 4, 5)).astype(F32)
        m = np.ones((1, 4, 5), dtype=F32)
        assert np.array_equal(T.hadamard_broadcast(x, m), x)

    def test_hadamard_wrong_shape(self):
        with pytest.raises(ValueError):
            T.hadamard_broadcast(np.zeros((3, 4, 5), dtype=F32),
                                 np.zeros((1, 4, 4), dtype=F32))

    def test_add_mismatch(self):
        with pytest.raises(ValueError):
            T.add(np.zeros((1, 2, 2), dtype=F32), np.zeros((1, 2, 3), dtype=F32))

    def test_linear_matches_manual(self):
        w = chw([[1, 2], [3, 4], [5, 6]])
        x = chw([10, 1])
        b = chw([0.5, 0, -1])
        assert np.array_equal(T.linear(x, w, b), chw([12.5, 34, 55]))


class TestGlobalAvgPool:
    def test_single_channel_mean(self):
        assert T.global_avgpool(chw([[[1, 3], [5, 7]]]))[0] == 4.0

    def test_zero_tensor(self):
        assert np.array_equal(T.global_avgpool(np.zeros((3, 2, 2), dtype=F32)),
                              np.zeros(3, dtype=F32))

    def test_constant_channels(self):
        x = np.stack([np.full((4, 4), 2.5, dtype=F32), np.full((4, 4), -1.5, dtype=F32)])
        assert np.array_equal(T.global_avgpool(x), chw([2.5, -1.5]))


class TestBilinearResize:
    def test_same_size_bit_identical(self):
        x = np.random.default_rng(3).standard_normal((3, 5, 7)).astype(F32)
        out = T.bilinear_resize(x, 5, 7)
        assert np.array_equal(out, x)

    def test_constant_stays_constant(self):
        x = np.full((2, 4, 4), 0.7, dtype=F32)
        out = T.bilinear_resize(x, 9, 3)
        assert np.allclose(out, 0.7, atol=1e-6)

    def test_half_pixel_row_upsample(self):
        x = chw([[[0.0, 1.0]]])
        out = T.bilinear_resize(x, 1, 4)
        assert np.allclose(out[0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-6)

    @settings(max_examples=25)
    @given(st.integers(0, 50), st.integers(1, 9), st.integers(1, 9))
    def test_output_within_input_range(self, seed, nh, nw):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, (2, 4, 6)).astype(F32)
        out = T.bilinear_resize(x, nh, nw)
        assert out.min() >= x.min() - 1e-6
        assert out.max() <= x.max() + 1e-6

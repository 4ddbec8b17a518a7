import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from triframe import backend
from triframe.errors import NumericalError, ValidationError
from triframe.tensor_core import (
    AdamState,
    adam_step,
    conv2d_backward,
    conv2d_forward,
    finite_diff_check,
    leaky_relu,
    leaky_relu_backward,
    lr_at_epoch,
)


def naive_conv(x, k, b):
    """Direct 7-loop reference, independent of im2col."""
    cout, cin, kk, _ = k.shape
    _, h, w = x.shape
    p = kk // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    out = np.zeros((cout, h, w))
    for o in range(cout):
        for i in range(h):
            for j in range(w):
                out[o, i, j] = np.sum(xp[:, i:i + kk, j:j + kk] * k[o]) + b[o]
    return out


class TestConvForward:
    def test_pointwise_scaling(self, kernels):
        out = conv2d_forward(np.ones((1, 3, 3)), np.full((1, 1, 1, 1), 2.0), np.array([0.5]))
        np.testing.assert_array_equal(out, np.full((1, 3, 3), 2.5))

    def test_box_filter_counts_padded_taps(self, kernels):
        out = conv2d_forward(np.ones((1, 3, 3)), np.full((1, 1, 3, 3), 1 / 9), np.zeros(1))[0]
        assert out[1, 1] == pytest.approx(1.0)
        for i, j in [(0, 1), (1, 0), (1, 2), (2, 1)]:
            assert out[i, j] == pytest.approx(6 / 9)
        for i, j in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            assert out[i, j] == pytest.approx(4 / 9)

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_matches_direct_loops(self, kernels, rng, k):
        x = rng.standard_normal((3, 7, 9))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        np.testing.assert_allclose(conv2d_forward(x, w, b), naive_conv(x, w, b), atol=1e-12)

    def test_batched_equals_per_sample(self, kernels, rng):
        x = rng.standard_normal((3, 2, 10, 6))
        w = rng.standard_normal((5, 2, 3, 3))
        b = rng.standard_normal(5)
        batched = conv2d_forward(x, w, b)
        for i in range(3):
            np.testing.assert_array_equal(batched[i], conv2d_forward(x[i], w, b))

    def test_channel_mismatch_is_rejected(self):
        with pytest.raises(ValidationError, match="Cin=3"):
            conv2d_forward(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValidationError, match="odd"):
            conv2d_forward(np.zeros((1, 4, 4)), np.zeros((1, 1, 2, 2)))

    def test_linear_in_input_and_kernel(self, kernels, rng):
        x = rng.standard_normal((2, 8, 8))
        w = rng.standard_normal((3, 2, 3, 3))
        a = 3.7
        np.testing.assert_allclose(conv2d_forward(a * x, w), a * conv2d_forward(x, w), atol=1e-12)
        np.testing.assert_allclose(conv2d_forward(x, a * w), a * conv2d_forward(x, w), atol=1e-12)

    def test_backends_agree(self, rng):
        if len(backend.available()) < 2:
            pytest.skip("compiled kernels not built")
        x = rng.standard_normal((2, 3, 17, 11)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        g = rng.standard_normal((2, 4, 17, 11)).astype(np.float32)
        results = []
        for name in ("cython", "python"):
            with backend.use_backend(name):
                results.append((conv2d_forward(x, w),) + conv2d_backward(g, x, w))
        for a, b in zip(*results):
            np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)

    def test_deterministic(self, kernels, rng):
        x = rng.standard_normal((4, 12, 12)).astype(np.float32)
        w = rng.standard_normal((4, 4, 3, 3)).astype(np.float32)
        assert conv2d_forward(x, w).tobytes() == conv2d_forward(x.copy(), w.copy()).tobytes()


class TestConvBackward:
    def test_zero_grad_out(self, kernels, rng):
        x = rng.standard_normal((2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        gx, gw, gb = conv2d_backward(np.zeros((3, 5, 5)), x, w)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_pointwise_kernel_input_grad(self, kernels, rng):
        g = rng.standard_normal((1, 6, 6))
        gx, _, _ = conv2d_backward(g, rng.standard_normal((1, 6, 6)), np.full((1, 1, 1, 1), 1.75))
        np.testing.assert_allclose(gx, 1.75 * g, atol=1e-15)

    def test_shape_inconsistency_rejected(self, rng):
        with pytest.raises(ValidationError):
            conv2d_backward(np.zeros((2, 5, 5)), np.zeros((2, 5, 5)), np.zeros((3, 2, 3, 3)))

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, kernels, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 8, 8))
        w = rng.standard_normal((4, 2, 3, 3))
        b = rng.standard_normal(4)
        proj = rng.standard_normal((4, 8, 8))
        gx, gw, gb = conv2d_backward(proj, x, w)

        assert finite_diff_check(lambda z: np.sum(conv2d_forward(z, w, b) * proj), x, gx).max_rel_error < 1e-4
        assert finite_diff_check(lambda z: np.sum(conv2d_forward(x, z, b) * proj), w, gw).max_rel_error < 1e-4
        assert finite_diff_check(lambda z: np.sum(conv2d_forward(x, w, z) * proj), b, gb).max_rel_error < 1e-4


class TestLeakyRelu:
    def test_values(self):
        np.testing.assert_allclose(leaky_relu(np.array([-1.0, 0.0, 2.0]), 0.2), [-0.2, 0.0, 2.0])

    def test_zero_slope_is_relu(self):
        np.testing.assert_array_equal(leaky_relu(np.array([-3.0, 4.0]), 0.0), [0.0, 4.0])

    def test_bad_slope(self):
        with pytest.raises(ValidationError):
            leaky_relu(np.zeros(2), 1.0)

    def test_finite_differences_away_from_kink(self, rng):
        x = rng.standard_normal((4, 6))
        x[np.abs(x) < 1e-6] = 0.5
        proj = rng.standard_normal(x.shape)
        g = leaky_relu_backward(proj, x, 0.2)
        res = finite_diff_check(lambda z: np.sum(leaky_relu(z, 0.2) * proj), x, g)
        assert res.max_rel_error < 1e-8


class TestAdam:
    def test_zero_gradient_fresh_state(self):
        p = np.array([0.3, -1.2])
        new, state = adam_step(p, np.zeros(2), AdamState.zeros_like(p), 1e-4)
        np.testing.assert_array_equal(new, p)
        assert state.t == 1

    def test_one_step_by_hand(self):
        new, state = adam_step(np.array([0.0]), np.array([1.0]), AdamState.zeros_like(np.zeros(1)), 1e-4)
        assert state.m[0] == pytest.approx(0.1, rel=1e-15)
        assert state.v[0] == pytest.approx(0.001, rel=1e-12)
        assert new[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)

    def test_deterministic(self, rng):
        p, g = rng.standard_normal(10), rng.standard_normal(10)
        s = AdamState(rng.random(10), rng.random(10), 7)
        a = adam_step(p, g, s, 1e-3)
        b = adam_step(p.copy(), g.copy(), AdamState(s.m.copy(), s.v.copy(), 7), 1e-3)
        assert a[0].tobytes() == b[0].tobytes()
        assert a[1].m.tobytes() == b[1].m.tobytes() and a[1].v.tobytes() == b[1].v.tobytes()

    def test_inputs_not_mutated(self, rng):
        p, g = rng.standard_normal(4), rng.standard_normal(4)
        s = AdamState.zeros_like(p)
        p0 = p.copy()
        adam_step(p, g, s, 1e-3)
        np.testing.assert_array_equal(p, p0)
        assert s.t == 0 and not s.m.any()

    @settings(max_examples=30, deadline=None)
    @given(t=st.integers(0, 10_000), seed=st.integers(0, 2**16))
    def test_zero_gradient_never_moves(self, t, seed):
        rng = np.random.default_rng(seed)
        p = rng.standard_normal(5)
        state = AdamState(np.zeros(5), rng.random(5), t)
        new, _ = adam_step(p, np.zeros(5), state, 1e-2)
        np.testing.assert_array_equal(new, p)

    def test_non_finite_gradient_rejected(self):
        with pytest.raises(NumericalError):
            adam_step(np.zeros(2), np.array([1.0, np.nan]), AdamState.zeros_like(np.zeros(2)), 1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            adam_step(np.zeros(2), np.zeros(3), AdamState.zeros_like(np.zeros(2)), 1e-4)


@pytest.mark.parametrize(
    "epoch, expected",
    [(0, 1e-4), (99, 1e-4), (100, 1e-5), (199, 1e-5), (200, 1e-6)],
)
def test_lr_schedule(epoch, expected):
    assert lr_at_epoch(epoch, 1e-4) == pytest.approx(expected, rel=1e-12)


class TestFiniteDiffCheck:
    def test_sum(self, rng):
        x = rng.standard_normal(7)
        res = finite_diff_check(lambda z: np.sum(z), x, np.ones(7))
        assert res.max_rel_error < 1e-10 and res.ok

    def test_square(self):
        res = finite_diff_check(lambda z: np.sum(z**2), np.array([1.0, 2.0]), np.array([2.0, 4.0]))
        assert res.max_rel_error < 1e-8

    def test_tuple_returning_function(self):
        res = finite_diff_check(lambda z: (np.sum(z**2), 2 * z), np.array([1.0, -3.0]))
        assert res.ok

    @pytest.mark.parametrize("scale, expected", [(2.0, 1.0), (0.5, 0.5)])
    def test_wrong_gradient_is_flagged(self, scale, expected):
        # error = |g_a - g_n| / max(1, |g_n|) with g_n = [2, 4]
        x = np.array([1.0, 2.0])
        res = finite_diff_check(lambda z: np.sum(z**2), x, scale * 2 * x)
        assert res.max_rel_error == pytest.approx(expected, rel=1e-6)
        assert not res.ok

    def test_non_finite_is_failure(self):
        with np.errstate(invalid="ignore"):
            res = finite_diff_check(lambda z: np.sum(np.log(z)), np.array([1e-6]), np.array([1e6]),
                                    eps=1e-5)
        assert not res.ok and res.max_rel_error == float("inf")

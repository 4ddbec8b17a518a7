import math

import numpy as np
import pytest

from triframe import backend
from triframe.errors import ValidationError
from triframe.frame_io import Clip
from triframe.metrics import (
    MsSsimParams,
    SsimParams,
    gaussian_window_1d,
    ms_ssim,
    ms_ssim_and_grad,
    parse_report,
    psnr,
    psnr_gain_report,
    sequence_table,
    ssim,
    ssim_and_grad,
    ssim_pair_and_grad,
)
from triframe.tensor_core import finite_diff_check

C1, C2 = 1e-4, 9e-4


def window_oracle():
    x = np.arange(11) - 5.0
    g = np.exp(-x**2 / 4.5)
    w = np.outer(g, g)
    return w / w.sum()


def ssim_maps_oracle(a, b):
    """Per-pixel SSIM and cs maps from explicit 11x11 window sums."""
    w = window_oracle()
    h, wd = a.shape
    s = np.empty((h - 10, wd - 10))
    cs = np.empty_like(s)
    for i in range(h - 10):
        for j in range(wd - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = np.sum(w * pa), np.sum(w * pb)
            va = np.sum(w * (pa - ma) ** 2)
            vb = np.sum(w * (pb - mb) ** 2)
            cov = np.sum(w * (pa - ma) * (pb - mb))
            cs[i, j] = (2 * cov + C2) / (va + vb + C2)
            s[i, j] = (2 * ma * mb + C1) / (ma**2 + mb**2 + C1) * cs[i, j]
    return s, cs


def ms_ssim_oracle(a, b, scales):
    weights = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333][:scales])
    weights = weights / weights.sum()
    value = 1.0
    for j in range(scales):
        s, cs = ssim_maps_oracle(a, b)
        term = s.mean() if j == scales - 1 else cs.mean()
        value *= max(term, 0.0) ** weights[j]
        h, w = a.shape[0] // 2 * 2, a.shape[1] // 2 * 2
        a = (a[0:h:2, 0:w:2] + a[1:h:2, 0:w:2] + a[0:h:2, 1:w:2] + a[1:h:2, 1:w:2]) / 4
        b = (b[0:h:2, 0:w:2] + b[1:h:2, 0:w:2] + b[0:h:2, 1:w:2] + b[1:h:2, 1:w:2]) / 4
    return value


class TestPsnr:
    def test_uniform_one_code_value(self):
        a = np.zeros((3, 16, 16))
        assert psnr(a + 1 / 255, a) == pytest.approx(20 * math.log10(255), abs=1e-9)
        assert psnr(a + 1 / 255, a) == pytest.approx(48.1308, abs=1e-3)

    def test_identical_is_inf(self):
        a = np.random.default_rng(0).random((3, 4, 4))
        assert psnr(a, a) == math.inf

    def test_luma_only(self):
        a = np.zeros((3, 4, 4))
        b = a.copy()
        b[1:] = 0.5
        assert psnr(a, b, luma_only=True) == math.inf

    def test_peak(self):
        assert psnr(np.full(4, 2.0), np.zeros(4), peak=255.0) == pytest.approx(10 * math.log10(255**2 / 4))

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))


class TestSsim:
    def test_window(self):
        np.testing.assert_allclose(np.outer(gaussian_window_1d(), gaussian_window_1d()), window_oracle(),
                                   atol=1e-15)
        assert SsimParams().c1 == pytest.approx(C1) and SsimParams().c2 == pytest.approx(C2)

    def test_identical_inputs(self, kernels, rng):
        a = rng.random((3, 40, 33))
        assert abs(ssim(a, a) - 1.0) < 1e-9

    def test_zero_variance_closed_form(self, kernels):
        value = ssim(np.zeros((32, 32)), np.full((32, 32), 0.5))
        assert abs(value - C1 / (0.25 + C1)) < 1e-9

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_window_sum_oracle(self, kernels, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((20, 24))
        b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(ssim_maps_oracle(a, b)[0].mean(), abs=1e-12)

    def test_symmetric(self, rng):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-14)

    def test_too_small(self):
        with pytest.raises(ValidationError):
            ssim(np.zeros((10, 30)), np.zeros((10, 30)))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, kernels, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((2, 16, 16)), rng.random((2, 16, 16))
        n = a.size
        _, g = ssim_and_grad(a, b)
        res = finite_diff_check(lambda z: n * ssim(z, b), a, n * g)
        assert res.max_rel_error < 1e-4


class TestMsSsim:
    def test_scale_count(self):
        p = MsSsimParams()
        assert p.scale_count(176, 176) == 5
        assert p.scale_count(96, 96) == 4
        assert p.scale_count(48, 48) == 3
        assert p.scale_count(11, 11) == 1

    def test_renormalized_weights(self):
        w = MsSsimParams().weights_for(4)
        assert w.sum() == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(w, np.array([0.0448, 0.2856, 0.3001, 0.2363]) / 0.8668)

    def test_identical_inputs(self, kernels, rng):
        a = rng.random((2, 96, 96))
        assert abs(ms_ssim(a, a) - 1.0) < 1e-9

    @pytest.mark.parametrize("shape, scales", [((48, 48), 3), ((50, 46), 3)])
    def test_matches_oracle(self, kernels, rng, shape, scales):
        a = rng.random(shape)
        b = np.clip(a + 0.1 * rng.standard_normal(shape), 0, 1)
        assert ms_ssim(a, b) == pytest.approx(ms_ssim_oracle(a, b, scales), abs=1e-12)

    def test_explicit_scales_must_fit(self):
        with pytest.raises(ValidationError):
            ms_ssim(np.zeros((48, 48)), np.zeros((48, 48)), scales=4)

    def test_negative_terms_clamp_to_zero(self):
        a = np.tile([0.0, 1.0], (24, 12))
        assert ms_ssim(a, 1.0 - a) == 0.0
        _, g = ms_ssim_and_grad(a, 1.0 - a)
        assert not g.any()

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, kernels, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((2, 48, 48))
        b = np.clip(a + 0.3 * rng.standard_normal(a.shape), 0, 1)
        n = a.size
        _, g = ms_ssim_and_grad(a, b)
        res = finite_diff_check(lambda z: n * ms_ssim(z, b), a, n * g, coords=80,
                                rng=np.random.default_rng(seed))
        assert res.max_rel_error < 1e-4

    def test_shared_pass_matches_separate(self, kernels, rng):
        a, b = rng.random((3, 48, 48)), rng.random((3, 48, 48))
        s, m, g = ssim_pair_and_grad(a, b, 0.2, 0.4)
        assert s == ssim(a, b) and m == ms_ssim(a, b)
        ref = 0.2 * ssim_and_grad(a, b)[1] + 0.4 * ms_ssim_and_grad(a, b)[1]
        np.testing.assert_allclose(g, ref, rtol=1e-10, atol=1e-18)

    def test_backends_agree(self, rng):
        if len(backend.available()) < 2:
            pytest.skip("compiled kernels not built")
        a, b = rng.random((2, 48, 48)), rng.random((2, 48, 48))
        out = {}
        for name in backend.available():
            with backend.use_backend(name):
                out[name] = ms_ssim_and_grad(a, b)
        assert out["cython"][0] == pytest.approx(out["python"][0], abs=1e-14)
        np.testing.assert_allclose(out["cython"][1], out["python"][1], rtol=1e-10, atol=1e-18)


class TestReport:
    def clips(self, rng):
        ref = Clip.from_array(rng.random((4, 3, 8, 8)))
        anchor = Clip.from_array(np.clip(ref.array() + 0.05, 0, 1))
        return ref, anchor

    def test_identity_gains_are_zero(self, rng):
        ref, anchor = self.clips(rng)
        report = psnr_gain_report(anchor, anchor, ref)
        assert all(f.delta_db == 0.0 for f in report.frames)
        assert report.mean_delta_db == 0.0

    def test_inf_inf_delta_is_zero(self, rng):
        ref, _ = self.clips(rng)
        report = psnr_gain_report(ref, ref, ref)
        assert report.frames[0].delta_db == 0.0

    def test_mean_is_arithmetic_mean(self, rng):
        ref, anchor = self.clips(rng)
        enhanced = Clip.from_array(np.clip(ref.array() + rng.uniform(0, 0.05, (4, 1, 1, 1)), 0, 1))
        report = psnr_gain_report(enhanced, anchor, ref)
        deltas = [psnr(enhanced[i], ref[i]) - psnr(anchor[i], ref[i]) for i in range(4)]
        assert abs(report.mean_delta_db - sum(deltas) / 4) < 1e-9

    def test_text_round_trip(self, rng):
        ref, anchor = self.clips(rng)
        report = psnr_gain_report(ref, anchor, ref)
        parsed = parse_report(report.to_text())
        assert len(parsed["frames"]) == 4
        assert parsed["frames"][0][2] == 99.99
        assert parsed["mean"][0] == pytest.approx(report.mean_anchor_db, abs=1e-6)

    def test_geometry_mismatch(self, rng):
        ref, anchor = self.clips(rng)
        short = Clip(ref.frames[:2])
        with pytest.raises(ValidationError):
            psnr_gain_report(short, anchor, ref)

    def test_sequence_table_format(self):
        text = sequence_table({"S1": 0.125, "S2": -0.5})
        assert text.splitlines() == ["Sequence No | S1 | S2", "PSNR Gain   | 0.12dB | -0.50dB"]

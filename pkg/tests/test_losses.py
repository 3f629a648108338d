"""Loss-formula tests: MCC against a brute-force oracle, spectral MSE
against the naive DFT, and analytic gradients against finite differences."""

import numpy as np
import pytest
import torch

from pulsebench.errors import RejectedInputError
from pulsebench.losses import (
    LossBreakdown,
    LossWeights,
    TargetBundle,
    l_freq,
    l_freq_t,
    l_reg,
    l_temp,
    l_temp_t,
    mcc,
    mcc_rows_t,
    psd_rows_t,
    total_loss,
    total_loss_t,
    unstack_image_t,
)
from pulsebench.mstmap import MstMap, stack_square
from pulsebench.timeseries import HR_BAND, TimeSeries, psd_power_rows

from oracles import band_limited_rows, brute_force_mcc, central_diff_grad, max_rel_err

FS = 30.0
T = 576


def sine(freq, t=T, amp=1.0, phase=0.0):
    tt = np.arange(t) / FS
    return TimeSeries(amp * np.sin(2 * np.pi * freq * tt + phase), FS)


class TestMcc:
    def test_self_correlation_band_limited(self):
        x = sine(1.5)
        assert mcc(x, x) >= 0.98

    def test_circular_shift_invariance(self):
        x = sine(1.5)
        base = mcc(x, x)
        shifted = TimeSeries(np.roll(x.samples, 10), FS)
        assert abs(mcc(x, shifted) - base) <= 1e-6

    def test_sign_flip_equals_self(self):
        # 1.25 Hz is bin-aligned with an integer half-period (12 samples)
        x = sine(1.25)
        neg = TimeSeries(-x.samples, FS)
        assert abs(mcc(x, neg) - mcc(x, x)) <= 1e-6

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for seed in range(6):
            r = np.random.default_rng(seed)
            a = band_limited_rows(r, 1, 96, FS, noise=0.3, normalize=False)[0]
            b = band_limited_rows(r, 1, 96, FS, noise=0.3, normalize=False)[0]
            fft_val = mcc(TimeSeries(a, FS), TimeSeries(b, FS))
            brute = brute_force_mcc(a, b, FS)
            assert abs(fft_val - brute) <= 1e-6

    def test_symmetry(self):
        # Bin-aligned in-band tones give C_pr = 1 for both sides, so the
        # correlation core's symmetry is visible exactly. (With the
        # default C_pr-from-prediction scaling, asymmetric out-of-band
        # leakage would otherwise scale the two directions differently.)
        rng = np.random.default_rng(5)
        tt = np.arange(128) / FS
        bins = rng.choice(np.arange(4, 12), size=3, replace=False)  # in-band
        a = sum(np.sin(2 * np.pi * (k * FS / 128) * tt + rng.uniform(0, 6)) for k in bins)
        bins2 = rng.choice(np.arange(4, 12), size=3, replace=False)
        b = sum(np.sin(2 * np.pi * (k * FS / 128) * tt + rng.uniform(0, 6)) for k in bins2)
        x, y = TimeSeries(a, FS), TimeSeries(b, FS)
        assert abs(mcc(x, y) - mcc(y, x)) <= 1e-9

    def test_scale_invariance(self):
        rng = np.random.default_rng(6)
        a = band_limited_rows(rng, 1, 128, FS, normalize=False)[0]
        b = band_limited_rows(rng, 1, 128, FS, normalize=False)[0]
        base = mcc(TimeSeries(a, FS), TimeSeries(b, FS))
        scaled = mcc(TimeSeries(3.7 * a, FS), TimeSeries(0.2 * b, FS))
        assert abs(base - scaled) <= 1e-9

    def test_zero_sigma_is_zero(self):
        z = TimeSeries(np.zeros(64), FS)
        x = sine(1.5, t=64)
        assert mcc(x, z) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(RejectedInputError):
            mcc(sine(1.0, t=64), sine(1.0, t=96))


class TestLTemp:
    def test_self_loss_near_floor(self):
        rng = np.random.default_rng(1)
        rows = band_limited_rows(rng, 8, T, FS)
        val, _ = l_temp(rows, rows, FS)
        assert 0.0 <= val <= 0.02

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        rows = band_limited_rows(rng, 4, T, FS)
        shifted = np.roll(rows, 17, axis=1)
        a, _ = l_temp(rows, rows, FS)
        b, _ = l_temp(rows, shifted, FS)
        assert abs(a - b) <= 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(RejectedInputError):
            l_temp(np.zeros((2, 64)), np.zeros((3, 64)), FS)

    def test_range(self):
        rng = np.random.default_rng(3)
        x = band_limited_rows(rng, 4, 96, FS)
        y = band_limited_rows(rng, 4, 96, FS)
        val, _ = l_temp(x, y, FS)
        assert 0.0 <= val <= 2.0

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = band_limited_rows(rng, 4, 64, FS, noise=0.1, normalize=False)
        y = band_limited_rows(rng, 4, 64, FS, noise=0.1, normalize=False)
        _, grad = l_temp(x, y, FS)
        fd = central_diff_grad(lambda a: l_temp(a, y, FS)[0], x, step=1e-4)
        assert max_rel_err(grad, fd) <= 1e-4


class TestLFreq:
    def test_identical_is_exactly_zero(self):
        rng = np.random.default_rng(4)
        rows = band_limited_rows(rng, 4, 96, FS)
        val, _ = l_freq(rows, rows)
        assert val == 0.0

    def test_two_tone_value_from_oracle(self):
        # unit sinusoids at bin-aligned 1.25 Hz and 2.5 Hz: each PSD has a
        # single bin P = N/2; the squared difference appears twice.
        x = sine(1.25).samples[np.newaxis, :]
        y = sine(2.5).samples[np.newaxis, :]
        from oracles import naive_psd

        expect = float(np.sum((naive_psd(x[0]) - naive_psd(y[0])) ** 2))
        val, _ = l_freq(x, y)
        assert expect == pytest.approx(2 * (T / 2) ** 2, rel=1e-9)
        assert val == pytest.approx(expect, rel=1e-9)

    def test_symmetric_and_nonnegative(self):
        rng = np.random.default_rng(7)
        x = band_limited_rows(rng, 3, 96, FS)
        y = band_limited_rows(rng, 3, 96, FS)
        a, _ = l_freq(x, y)
        b, _ = l_freq(y, x)
        assert a == pytest.approx(b, abs=1e-12)
        assert a >= 0.0

    def test_zero_iff_psds_match(self):
        # same PSD, different phase: loss must be 0
        x = sine(1.25, phase=0.0).samples[np.newaxis, :]
        y = sine(1.25, phase=1.3).samples[np.newaxis, :]
        val, _ = l_freq(x, y)
        assert val <= 1e-16 * (T / 2) ** 2

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = band_limited_rows(rng, 4, 64, FS, noise=0.1, normalize=False)
        y = band_limited_rows(rng, 4, 64, FS, noise=0.1, normalize=False)
        _, grad = l_freq(x, y)
        fd = central_diff_grad(lambda a: l_freq(a, y)[0], x, step=1e-4)
        assert max_rel_err(grad, fd) <= 1e-4

    def test_psd_matches_timeseries_estimator(self):
        rng = np.random.default_rng(8)
        rows = rng.standard_normal((5, 128))
        torch_psd = psd_rows_t(torch.from_numpy(rows)).numpy()
        np.testing.assert_allclose(torch_psd, psd_power_rows(rows), atol=1e-12)


class TestLReg:
    def test_values_and_gradients(self):
        assert l_reg(0.5, 0.5) == (0.0, 0.0)
        assert l_reg(0.8, 0.5) == (pytest.approx(0.3), 1.0)
        assert l_reg(0.2, 0.5) == (pytest.approx(0.3), -1.0)


class TestTotalLoss:
    def test_weighted_recombination(self):
        # components (0.1, 0.2, 0.05) at defaults -> 5*0.1 + 0.2 + 5*0.05
        w = LossWeights()
        total = w.alpha * 0.1 + w.beta * 0.2 + w.gamma * 0.05
        assert total == pytest.approx(0.95, abs=1e-12)

    def test_breakdown_recombines_exactly(self):
        rng = np.random.default_rng(9)
        x = torch.from_numpy(band_limited_rows(rng, 4, 96, FS))
        y = torch.from_numpy(band_limited_rows(rng, 4, 96, FS))
        hr_p = torch.tensor([0.7], dtype=torch.float64)
        hr_l = torch.tensor([0.4], dtype=torch.float64)
        w = LossWeights()
        _, br = total_loss_t(x, hr_p, y, hr_l, FS, weights=w)
        recombined = w.alpha * br.l_reg + w.beta * br.l_temp + w.gamma * br.l_freq
        assert abs(br.total - recombined) <= 1e-12

    def test_perfect_prediction_floor(self):
        rng = np.random.default_rng(10)
        rows = torch.from_numpy(band_limited_rows(rng, 6, T, FS))
        hr = torch.tensor([0.5], dtype=torch.float64)
        w = LossWeights()
        _, br = total_loss_t(rows, hr, rows.clone(), hr.clone(), FS, weights=w)
        assert br.total <= 0.02 * w.beta

    def test_zero_weights_zero_total(self):
        rng = np.random.default_rng(11)
        x = torch.from_numpy(band_limited_rows(rng, 3, 96, FS))
        y = torch.from_numpy(band_limited_rows(rng, 3, 96, FS))
        _, br = total_loss_t(
            x,
            torch.tensor([0.9], dtype=torch.float64),
            y,
            torch.tensor([0.1], dtype=torch.float64),
            FS,
            weights=LossWeights(0.0, 0.0, 0.0),
        )
        assert br.total == 0.0

    def test_wrapper_gradients_flow_to_both_heads(self):
        rng = np.random.default_rng(12)
        rows = band_limited_rows(rng, 6, 96, FS).astype(np.float32)
        m = MstMap(rows, FS, 1)
        stacked = stack_square(m, 3)

        class Pred:
            bvpmap_pred = rng.standard_normal(stacked.image.shape)
            hr_pred = 0.8

        target = TargetBundle(
            map_rows=rows, hr_label=0.3, fs=FS, layout=stacked.layout
        )
        br, grad_map, grad_hr = total_loss(Pred(), target)
        assert isinstance(br, LossBreakdown)
        assert grad_map.shape == stacked.image.shape
        assert np.any(grad_map != 0.0)
        assert float(grad_hr) == pytest.approx(LossWeights().alpha)

    def test_missing_pieces_contribute_zero(self):
        _, br = total_loss_t(None, None, None, None, FS)
        assert br.total == 0.0 and br.l_reg == 0.0


class TestUnstackTensor:
    def test_matches_numpy_unstack(self):
        from pulsebench.mstmap import unstack

        rng = np.random.default_rng(13)
        rows = rng.random((12, 96)).astype(np.float32)
        m = MstMap(rows, FS, 3)
        s = stack_square(m, 3, pad_height_multiple=8)
        back_np = unstack(s).rows
        back_t = unstack_image_t(
            torch.from_numpy(s.image), s.layout
        ).numpy()
        np.testing.assert_array_equal(back_np, back_t)
        np.testing.assert_array_equal(back_np, rows)

    def test_batched(self):
        rng = np.random.default_rng(14)
        rows = rng.random((6, 48)).astype(np.float32)
        m = MstMap(rows, FS, 2)
        s = stack_square(m, 3)
        batch = torch.from_numpy(np.stack([s.image, s.image * 2.0]))
        out = unstack_image_t(batch, s.layout)
        assert out.shape == (2, 6, 48)
        np.testing.assert_allclose(out[1].numpy(), rows * 2.0, atol=1e-6)


class TestFixedLags:
    def test_fixed_lag_bypasses_argmax(self):
        x = torch.from_numpy(sine(1.25, t=96).samples[np.newaxis, :])
        vals, _, lags = mcc_rows_t(x, x, FS)
        forced = lags + 3
        vals2, _, lags2 = mcc_rows_t(x, x, FS, fixed_lags=forced)
        assert torch.equal(lags2, forced)
        assert float(vals2[0]) < float(vals[0])

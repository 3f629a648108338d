"""Signal-primitive tests: filtering, normalization, spectra, HR readout."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pulsebench.errors import NoPeakError, RejectedInputError
from pulsebench.timeseries import (
    HR_BAND,
    FreqBand,
    Spectrum,
    TimeSeries,
    band_power_ratio,
    bandpass,
    dominant_hr,
    hr_bpm_from_unit,
    hr_unit_from_bpm,
    minmax_normalize,
    psd,
)

from oracles import naive_psd

FS = 30.0
T = 576


def sine(freq, fs=FS, t=T, amp=1.0, phase=0.0):
    tt = np.arange(t) / fs
    return TimeSeries(amp * np.sin(2 * np.pi * freq * tt + phase), fs)


def psd_peak_amplitude(ts: TimeSeries) -> float:
    """Amplitude of the dominant tone measured from the PSD peak.

    For a sinusoid a*sin(2*pi*f*t), the one-sided peak power is about
    N*a^2/2, so a = sqrt(2*P/N).
    """
    spec = psd(ts)
    return float(np.sqrt(2.0 * spec.power.max() / len(ts)))


class TestBandpass:
    def test_passband_tone_amplitude_preserved(self):
        out = bandpass(sine(1.2), HR_BAND)
        assert len(out) == T and out.fs == FS
        assert 0.9 <= psd_peak_amplitude(out) <= 1.1

    def test_dc_rejected(self):
        out = bandpass(TimeSeries(np.full(T, 5.0), FS), HR_BAND)
        assert abs(out.samples.mean()) < 1e-6

    def test_stopband_tone_attenuated(self):
        out = bandpass(sine(6.0), HR_BAND)
        assert psd_peak_amplitude(out) <= 0.1

    def test_stopband_below(self):
        out = bandpass(sine(0.3), HR_BAND)
        assert psd_peak_amplitude(out) <= 0.1

    def test_band_invalid_for_fs(self):
        with pytest.raises(RejectedInputError):
            bandpass(sine(1.0, fs=4.0), FreqBand(0.7, 3.0))

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(T)
        y = rng.standard_normal(T)
        a, b = 1.7, -0.4
        lhs = bandpass(TimeSeries(a * x + b * y, FS)).samples
        rhs = a * bandpass(TimeSeries(x, FS)).samples + b * bandpass(
            TimeSeries(y, FS)
        ).samples
        scale = np.abs(rhs).max()
        np.testing.assert_allclose(lhs, rhs, atol=1e-9 * scale)

    def test_short_signal_supported(self):
        out = bandpass(TimeSeries(np.sin(np.arange(9)), FS))
        assert len(out) == 9


class TestMinmaxNormalize:
    def test_basic(self):
        out = minmax_normalize(TimeSeries([1.0, 2.0, 3.0], FS))
        np.testing.assert_allclose(out.samples, [0.0, 0.5, 1.0])

    def test_constant_maps_to_zeros(self):
        out = minmax_normalize(TimeSeries([7.0, 7.0, 7.0], FS))
        np.testing.assert_array_equal(out.samples, [0.0, 0.0, 0.0])

    def test_negative_values(self):
        out = minmax_normalize(TimeSeries([-1.0, 0.0, 3.0], FS))
        np.testing.assert_allclose(out.samples, [0.0, 0.25, 1.0])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_idempotent_on_nonconstant(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(32)
        if np.ptp(x) < 1e-9:
            return
        once = minmax_normalize(TimeSeries(x, FS))
        twice = minmax_normalize(once)
        np.testing.assert_allclose(once.samples, twice.samples, atol=1e-12)
        assert once.samples.min() == 0.0 and once.samples.max() == 1.0


class TestPsd:
    def test_bin_aligned_sine_single_bin(self):
        # 1.25 Hz is exactly bin 24 at T=576, fs=30
        spec = psd(sine(1.25))
        assert spec.power.max() / spec.power.sum() >= 0.95
        assert np.argmax(spec.power) == 24

    def test_zero_signal_zero_spectrum(self):
        spec = psd(TimeSeries(np.zeros(64), FS))
        np.testing.assert_array_equal(spec.power, 0.0)

    def test_two_tone_equal_power(self):
        # 1.25 Hz and 2.5 Hz are both bin-aligned at T=576
        x = sine(1.25).samples + sine(2.5, phase=1.0).samples
        spec = psd(TimeSeries(x, FS))
        top = np.sort(spec.power)[-2:]
        assert abs(top[0] - top[1]) / top[1] < 0.01
        assert top.sum() / spec.power.sum() > 0.99

    def test_matches_naive_dft_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal(96)
        spec = psd(TimeSeries(x, FS))
        np.testing.assert_allclose(spec.power, naive_psd(x), atol=1e-9)

    def test_too_short_rejected(self):
        with pytest.raises(RejectedInputError):
            psd(TimeSeries(np.arange(7.0), FS))

    @given(st.integers(0, 2**32 - 1), st.sampled_from([32, 57, 64, 100]))
    @settings(max_examples=40, deadline=None)
    def test_parseval(self, seed, n):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(n)
        spec = psd(TimeSeries(x, FS))
        z = x - x.mean()
        energy = float(np.sum(z**2))
        assert abs(spec.power.sum() - energy) <= 1e-6 * max(energy, 1e-12)


class TestDominantHr:
    def test_72_bpm(self):
        spec = psd(sine(1.2))
        df = FS / T
        assert abs(dominant_hr(spec, HR_BAND) - 72.0) <= df * 60.0

    def test_band_edge(self):
        spec = psd(sine(0.7))
        assert abs(dominant_hr(spec, HR_BAND) - 42.0) <= 1.6

    def test_argmax_beats_smaller_peak(self):
        x = sine(1.0, amp=1.0).samples + sine(2.0, amp=0.5, phase=0.7).samples
        hr = dominant_hr(psd(TimeSeries(x, FS)), HR_BAND)
        assert abs(hr - 60.0) <= FS / T * 60.0

    def test_zero_in_band_power_raises(self):
        spec = psd(sine(6.0))
        power = spec.power.copy()
        freqs = spec.freqs
        power[(freqs >= 0.7) & (freqs <= 3.0)] = 0.0
        with pytest.raises(NoPeakError):
            dominant_hr(Spectrum(power, spec.freq_resolution, spec.fs), HR_BAND)

    def test_scale_invariant(self):
        spec = psd(sine(1.37))
        scaled = Spectrum(spec.power * 173.0, spec.freq_resolution, spec.fs)
        assert dominant_hr(spec, HR_BAND) == dominant_hr(scaled, HR_BAND)


class TestBandPowerRatio:
    def test_in_band_tone(self):
        assert band_power_ratio(sine(1.5), HR_BAND) >= 0.99

    def test_out_of_band_tone(self):
        assert band_power_ratio(sine(6.0), HR_BAND) <= 0.01

    def test_zero_signal(self):
        assert band_power_ratio(TimeSeries(np.zeros(64), FS), HR_BAND) == 0.0


class TestHrScale:
    def test_roundtrip(self):
        for bpm in (42.0, 72.0, 111.0, 180.0):
            assert abs(hr_bpm_from_unit(hr_unit_from_bpm(bpm)) - bpm) < 1e-9

    def test_range(self):
        assert hr_unit_from_bpm(42.0) == 0.0
        assert hr_unit_from_bpm(180.0) == 1.0


class TestValidation:
    def test_nonfinite_rejected(self):
        with pytest.raises(RejectedInputError):
            TimeSeries([1.0, np.nan, 2.0], FS)

    def test_bad_fs_rejected(self):
        with pytest.raises(RejectedInputError):
            TimeSeries([1.0, 2.0], 0.0)

    def test_band_ordering(self):
        with pytest.raises(RejectedInputError):
            FreqBand(3.0, 0.7)

"""Deterministic 1-D signal primitives.

Band-pass filtering, min-max normalization, periodogram spectra and
dominant-frequency heart-rate readout. Everything here is a pure function
of its inputs; the same estimator definitions are reused by the loss
functions so that training and evaluation agree on what "power" means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, filtfilt

from .errors import NoPeakError, RejectedInputError

# Pass band used throughout: heart rates of 42..180 bpm.
HR_BAND_HZ = (0.7, 3.0)

# Range guard for min-max normalization of near-constant signals.
RANGE_EPS = 1e-12


@dataclass(frozen=True)
class FreqBand:
    """Frequency band in Hz, 0 < lo < hi."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise RejectedInputError("band edges must be finite")
        if not 0.0 < self.lo < self.hi:
            raise RejectedInputError(f"invalid band [{self.lo}, {self.hi}]")

    def validate_for(self, fs: float) -> None:
        """Raise if the band is not strictly below the Nyquist rate."""
        if self.hi >= fs / 2.0:
            raise RejectedInputError(
                f"band [{self.lo}, {self.hi}] Hz invalid for fs={fs} Hz"
            )


HR_BAND = FreqBand(*HR_BAND_HZ)


@dataclass(frozen=True)
class TimeSeries:
    """Uniformly sampled real-valued signal.

    Parameters
    ----------
    samples : array_like
        Signal values, length >= 2, all finite.
    fs : float
        Sampling rate in Hz, finite and positive.
    """

    samples: np.ndarray
    fs: float

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 2:
            raise RejectedInputError("time series needs >= 2 samples")
        if not np.all(np.isfinite(samples)):
            raise RejectedInputError("time series contains non-finite values")
        if not (np.isfinite(self.fs) and self.fs > 0):
            raise RejectedInputError(f"invalid sampling rate {self.fs}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "fs", float(self.fs))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.fs


@dataclass(frozen=True)
class Spectrum:
    """One-sided power spectrum; bin k sits at k * freq_resolution Hz."""

    power: np.ndarray
    freq_resolution: float
    fs: float

    def __post_init__(self):
        power = np.asarray(self.power, dtype=np.float64)
        if not np.all(np.isfinite(power)) or np.any(power < 0):
            raise RejectedInputError("spectrum power must be finite and >= 0")
        object.__setattr__(self, "power", power)

    @property
    def freqs(self) -> np.ndarray:
        return np.arange(self.power.size) * self.freq_resolution


def bandpass(ts: TimeSeries, band: FreqBand = HR_BAND) -> TimeSeries:
    """Zero-phase order-4 Butterworth band-pass.

    The filter is applied forward and backward (``filtfilt``) so the output
    stays time-aligned with the input; length and sampling rate are
    preserved.
    """
    band.validate_for(ts.fs)
    x = ts.samples
    sos_b, sos_a = _butter_coeffs(ts.fs, band)
    # filtfilt's default pad length exceeds very short inputs; clamp it.
    padlen = min(3 * max(len(sos_a), len(sos_b)), x.size - 1)
    y = filtfilt(sos_b, sos_a, x, padlen=padlen)
    return TimeSeries(y, ts.fs)


def _butter_coeffs(fs: float, band: FreqBand):
    nyq = fs / 2.0
    # butter with btype="band" doubles the order: N=2 -> 4-pole band-pass
    return butter(2, [band.lo / nyq, band.hi / nyq], btype="band")


def bandpass_rows(rows: np.ndarray, fs: float, band: FreqBand = HR_BAND) -> np.ndarray:
    """Vectorized :func:`bandpass` over the last axis of a 2-D array."""
    band.validate_for(fs)
    rows = np.asarray(rows, dtype=np.float64)
    b, a = _butter_coeffs(fs, band)
    padlen = min(3 * max(len(a), len(b)), rows.shape[-1] - 1)
    return filtfilt(b, a, rows, axis=-1, padlen=padlen)


def minmax_normalize(ts: TimeSeries) -> TimeSeries:
    """Affinely map the signal onto [0, 1]; constant input maps to zeros."""
    return TimeSeries(minmax_array(ts.samples), ts.fs)


def minmax_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo = x.min(axis=-1, keepdims=True)
    rng = x.max(axis=-1, keepdims=True) - lo
    scaled = (x - lo) / np.where(rng > RANGE_EPS, rng, 1.0)
    return np.where(rng > RANGE_EPS, scaled, 0.0)


def psd(ts: TimeSeries) -> Spectrum:
    """One-sided periodogram of the mean-removed signal.

    Power is scaled so that ``sum(power) == sum((x - mean(x))**2)``
    (Parseval). No taper is applied: a bin-aligned unit sinusoid puts all
    of its power into a single bin, which the loss functions and the peak
    readout both rely on.
    """
    if len(ts) < 8:
        raise RejectedInputError("psd requires at least 8 samples")
    power = psd_power_rows(ts.samples[np.newaxis, :])[0]
    return Spectrum(power, ts.fs / len(ts), ts.fs)


def psd_power_rows(rows: np.ndarray) -> np.ndarray:
    """Periodogram power for each row of a 2-D array (see :func:`psd`)."""
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[-1]
    z = rows - rows.mean(axis=-1, keepdims=True)
    spec = np.abs(np.fft.rfft(z, axis=-1)) ** 2 / n
    spec[..., 1:] *= 2.0
    if n % 2 == 0:
        spec[..., -1] /= 2.0
    return spec


def dominant_hr(spec: Spectrum, band: FreqBand = HR_BAND) -> float:
    """Heart rate in bpm at the strongest in-band spectral peak.

    The peak bin is refined with a 3-point quadratic fit on log-power,
    which keeps the bias well under one bin for quasi-periodic pulses.

    Raises
    ------
    NoPeakError
        If every in-band bin has zero power.
    """
    band.validate_for(spec.fs)
    freqs = spec.freqs
    in_band = np.flatnonzero((freqs >= band.lo) & (freqs <= band.hi))
    if in_band.size == 0:
        raise NoPeakError(f"band [{band.lo}, {band.hi}] contains no bins")
    p_band = spec.power[in_band]
    if not np.any(p_band > 0):
        raise NoPeakError("all in-band power is zero")
    k = int(in_band[np.argmax(p_band)])
    delta = _quadratic_offset(spec.power, k)
    return 60.0 * (k + delta) * spec.freq_resolution


def _quadratic_offset(power: np.ndarray, k: int) -> float:
    """Sub-bin peak offset in [-0.5, 0.5] from a log-power parabola."""
    if k <= 0 or k >= power.size - 1:
        return 0.0
    tiny = np.finfo(np.float64).tiny
    a, b, c = np.log(power[k - 1 : k + 2] + tiny)
    denom = a - 2.0 * b + c
    if denom == 0.0:
        return 0.0
    return float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))


def band_power_ratio(ts: TimeSeries, band: FreqBand = HR_BAND) -> float:
    """Fraction of spectral power inside ``band``; 0 for a zero signal."""
    spec = psd(ts)
    total = spec.power.sum()
    if total <= 0.0:
        return 0.0
    freqs = spec.freqs
    sel = (freqs >= band.lo) & (freqs <= band.hi)
    return float(spec.power[sel].sum() / total)


# HR labels are regressed on a [0, 1] scale spanning the pass band
# (42..180 bpm) so the L1 term stays comparable to the map losses.

HR_MIN_BPM = 60.0 * HR_BAND_HZ[0]
HR_MAX_BPM = 60.0 * HR_BAND_HZ[1]


def hr_unit_from_bpm(bpm: float) -> float:
    return (bpm - HR_MIN_BPM) / (HR_MAX_BPM - HR_MIN_BPM)


def hr_bpm_from_unit(unit: float) -> float:
    return HR_MIN_BPM + unit * (HR_MAX_BPM - HR_MIN_BPM)

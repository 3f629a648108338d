"""Classical rPPG estimators: GREEN, CHROM, POS and LGI.

These serve two roles: reference baselines for the learned model and
pseudo-label generators for self-supervised pre-training. CHROM and POS
run on short overlapping windows (1.6 s, 50% overlap, Hann overlap-add);
LGI projects out the dominant variation direction globally.

References: de Haan & Jeanne 2013 (CHROM), Wang et al. 2017 (POS),
Pilz et al. 2018 (LGI), Verkruysse et al. 2008 (GREEN).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import NoPeakError, RejectedInputError
from .mstmap import RoiTraceSet, PbvpMap, condition_rows, roi_subsets
from .timeseries import (
    HR_BAND,
    FreqBand,
    TimeSeries,
    band_power_ratio,
    bandpass,
    dominant_hr,
    psd,
)

WINDOW_SECONDS = 1.6

# Pseudo-labels below this in-band power ratio are excluded from the
# pre-training regression loss.
CONFIDENCE_FLOOR = 0.2


class TraditionalMethod(enum.Enum):
    GREEN = "green"
    CHROM = "chrom"
    POS = "pos"
    LGI = "lgi"


@dataclass(frozen=True)
class RgbTrace:
    """Mean skin-pixel color per frame, one series per channel."""

    r: TimeSeries
    g: TimeSeries
    b: TimeSeries

    def __post_init__(self):
        if not (len(self.r) == len(self.g) == len(self.b)):
            raise RejectedInputError("R/G/B traces must have equal length")
        if not (self.r.fs == self.g.fs == self.b.fs):
            raise RejectedInputError("R/G/B traces must share fs")

    @property
    def fs(self) -> float:
        return self.r.fs

    def as_array(self) -> np.ndarray:
        """Stack to [3, T]."""
        return np.stack([self.r.samples, self.g.samples, self.b.samples])


@dataclass(frozen=True)
class PseudoLabel:
    """Traditional-method HR estimate with an in-band-power confidence."""

    hr_bpm: float
    method: TraditionalMethod
    confidence: float
    reliable: bool


def green(trace: RgbTrace, band: FreqBand = HR_BAND) -> TimeSeries:
    """Band-passed, mean-removed green channel."""
    return _condition(_green_raw(trace), trace.fs, band)


def _green_raw(trace: RgbTrace) -> np.ndarray:
    g = trace.g.samples
    if np.ptp(g) == 0.0:
        return np.zeros_like(g)
    return g - g.mean()


def _condition(raw: np.ndarray, fs: float, band: FreqBand) -> TimeSeries:
    if not np.any(raw):
        return TimeSeries(raw, fs)
    out = bandpass(TimeSeries(raw, fs), band)
    return TimeSeries(out.samples - out.samples.mean(), fs)


def _normalize_window(c: np.ndarray) -> np.ndarray:
    """Divide each channel by its temporal mean (guarding near-zero means)."""
    mu = c.mean(axis=1, keepdims=True)
    mu = np.where(np.abs(mu) < 1e-12, 1.0, mu)
    return c / mu


def _overlap_add(trace: RgbTrace, project) -> tuple[np.ndarray, list[int]]:
    """Run ``project`` on Hann-weighted 1.6 s windows at 50% overlap.

    ``project`` maps a [3, l] channel block to a 1-D pulse segment or
    None to skip (degenerate window). Skipped starts are returned for
    diagnostics. Output is weight-normalized so overlapping windows
    average rather than double-count.
    """
    c = trace.as_array()
    t = c.shape[1]
    l = min(int(round(WINDOW_SECONDS * trace.fs)), t)
    l = max(l, 4)
    hop = max(l // 2, 1)
    window = np.hanning(l)
    acc = np.zeros(t)
    wacc = np.zeros(t)
    skipped = []
    starts = list(range(0, t - l + 1, hop))
    if starts[-1] != t - l:
        starts.append(t - l)
    for s in starts:
        seg = project(c[:, s : s + l])
        if seg is None:
            skipped.append(s)
            continue
        seg = seg - seg.mean()
        sd = seg.std()
        if sd < 1e-12:
            skipped.append(s)
            continue
        acc[s : s + l] += window * (seg / sd)
        wacc[s : s + l] += window
    out = np.where(wacc > 1e-8, acc / np.where(wacc > 1e-8, wacc, 1.0), 0.0)
    return out, skipped


def _chrom_project(block: np.ndarray):
    cn = _normalize_window(block)
    r, g, b = cn
    x = 3.0 * r - 2.0 * g
    y = 1.5 * r + g - 1.5 * b
    sy = y.std()
    if sy < 1e-12:
        return None
    return x - (x.std() / sy) * y


def _pos_project(block: np.ndarray):
    cn = _normalize_window(block)
    r, g, b = cn
    s1 = g - b
    s2 = -2.0 * r + g + b
    sd2 = s2.std()
    if sd2 < 1e-12:
        return None
    return s1 + (s1.std() / sd2) * s2


def chrom(
    trace: RgbTrace, band: FreqBand = HR_BAND, return_skipped: bool = False
):
    """Chrominance pulse signal (X/Y projection, per-window alpha tuning)."""
    raw, skipped = _overlap_add(trace, _chrom_project)
    out = _condition(raw, trace.fs, band)
    return (out, skipped) if return_skipped else out


def pos(
    trace: RgbTrace, band: FreqBand = HR_BAND, return_skipped: bool = False
):
    """Plane-orthogonal-to-skin pulse signal."""
    raw, skipped = _overlap_add(trace, _pos_project)
    out = _condition(raw, trace.fs, band)
    return (out, skipped) if return_skipped else out


def lgi(trace: RgbTrace, band: FreqBand = HR_BAND) -> TimeSeries:
    """Local group invariance: project out the leading variation direction.

    The projection I - uu^T built from the leading eigenvector of the
    3x3 channel covariance removes the dominant (mostly specular/motion)
    component; the green coordinate of the remainder carries the pulse.
    """
    return _condition(_lgi_raw(trace), trace.fs, band)


def _lgi_raw(trace: RgbTrace) -> np.ndarray:
    c = trace.as_array()
    c = c - c.mean(axis=1, keepdims=True)
    cov = (c @ c.T) / c.shape[1]
    _, vecs = np.linalg.eigh(cov)
    u = vecs[:, -1]  # eigenvector of the largest eigenvalue
    projected = c - np.outer(u, u @ c)
    return projected[1].copy()


def _raw_signal(method: TraditionalMethod, trace: RgbTrace) -> np.ndarray:
    """The method's pulse estimate before the final band-pass.

    Confidence is judged on this signal: after band-passing, even pure
    noise would look perfectly in-band.
    """
    if method is TraditionalMethod.GREEN:
        return _green_raw(trace)
    if method is TraditionalMethod.CHROM:
        return _overlap_add(trace, _chrom_project)[0]
    if method is TraditionalMethod.POS:
        return _overlap_add(trace, _pos_project)[0]
    return _lgi_raw(trace)


def run_method(
    method: TraditionalMethod, trace: RgbTrace, band: FreqBand = HR_BAND
) -> TimeSeries:
    return _condition(_raw_signal(method, trace), trace.fs, band)


def rgb_from_traces(
    traces: RoiTraceSet, roi_indices=None
) -> RgbTrace:
    """Average the selected ROIs and pick out the R/G/B channels.

    Channels are matched by name; trace sets without R/G/B names fall
    back to their first three channels.
    """
    mean = traces.mean_rgb(roi_indices)
    names = [c.upper() for c in traces.channel_names]
    if all(ch in names for ch in "RGB"):
        idx = [names.index(ch) for ch in "RGB"]
    else:
        if traces.n_channels < 3:
            raise RejectedInputError("need 3 channels for an RGB trace")
        idx = [0, 1, 2]
    return RgbTrace(
        TimeSeries(mean[idx[0]], traces.fs),
        TimeSeries(mean[idx[1]], traces.fs),
        TimeSeries(mean[idx[2]], traces.fs),
    )


def pseudo_hr(
    traces: RoiTraceSet,
    method: TraditionalMethod = TraditionalMethod.CHROM,
    band: FreqBand = HR_BAND,
) -> PseudoLabel:
    """Estimate HR from the all-ROI mean trace with the chosen method.

    Confidence is the in-band power ratio of the estimated pulse signal;
    labels with no spectral peak or confidence below
    ``CONFIDENCE_FLOOR`` are flagged unreliable and excluded from the
    pre-training regression loss.
    """
    trace = rgb_from_traces(traces)
    raw = _raw_signal(method, trace)
    if not np.any(raw):
        return PseudoLabel(float("nan"), method, 0.0, False)
    confidence = band_power_ratio(TimeSeries(raw, traces.fs), band)
    signal = _condition(raw, traces.fs, band)
    try:
        hr = dominant_hr(psd(signal), band)
    except NoPeakError:
        return PseudoLabel(float("nan"), method, confidence, False)
    reliable = confidence >= CONFIDENCE_FLOOR
    return PseudoLabel(float(hr), method, float(confidence), reliable)


def build_pbvpmap(
    traces: RoiTraceSet,
    method: TraditionalMethod = TraditionalMethod.CHROM,
    band: FreqBand = HR_BAND,
) -> PbvpMap:
    """Pseudo-BVP map: one method signal per ROI subset, conditioned.

    Rows follow the MSTmap layout (subset-major, channels innermost); all
    channels of a subset share that subset's pseudo signal. Subsets where
    the method degenerates fall back to the all-ROI signal and are listed
    in ``fallback_rows``.
    """
    if traces.n_frames % 3 != 0:
        raise RejectedInputError(
            f"trace length {traces.n_frames} not divisible by 3"
        )
    subsets = roi_subsets(traces.n_rois)
    global_signal = run_method(method, rgb_from_traces(traces), band).samples
    signals = np.empty((len(subsets), traces.n_frames))
    fallbacks = []
    for i, subset in enumerate(subsets):
        sig = run_method(method, rgb_from_traces(traces, subset), band).samples
        if sig.std() < 1e-12:
            sig = global_signal
            fallbacks.append(i)
        signals[i] = sig
    conditioned = condition_rows(signals, traces.fs, band)
    rows = np.repeat(conditioned, traces.n_channels, axis=0)
    index = tuple(
        (subset, name) for subset in subsets for name in traces.channel_names
    )
    return PbvpMap(
        rows,
        traces.fs,
        traces.n_channels,
        index,
        fallback_rows=tuple(fallbacks),
    )

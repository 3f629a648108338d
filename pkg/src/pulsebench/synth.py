"""Synthetic BVP and ROI-trace generator with known ground truth.

Stands in for real video datasets at desk scale: every HR-recovery test
in the suite checks an estimate against the heart rate this generator was
told to produce. Waveforms are quasi-periodic beat templates (fundamental
plus two harmonics forming a dicrotic-notch-like secondary hump) with
optional per-beat period jitter, channel-differential pulse strength,
slow intensity drift and white noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import RejectedInputError
from .mstmap import (
    DEFAULT_CHANNELS,
    RoiTraceSet,
    read_traces_csv,
    write_traces_csv,
)
from .timeseries import TimeSeries

# Beat template: amplitudes and phase offsets of the fundamental and two
# overtones. The second harmonic at phase 1.0 rad puts a secondary hump on
# the downslope (dicrotic-notch proxy). Tests freeze these values.
HARMONIC_AMPS = (1.0, 0.35, 0.2)
HARMONIC_PHASES = (0.0, 1.0, 2.0)

# Per-channel pulsatile strength: green carries the strongest pulse so the
# chrominance projections have signal to separate.
DEFAULT_PULSE_STRENGTH = {"R": 0.0033, "G": 0.0077, "B": 0.0051}
DEFAULT_BASELINE = {"R": 0.62, "G": 0.45, "B": 0.38}


@dataclass(frozen=True)
class SynthConfig:
    """Parameters for one generated window."""

    hr_bpm: float = 72.0
    fs: float = 30.0
    t_frames: int = 576
    harmonic_amps: tuple = HARMONIC_AMPS
    hrv_jitter: float = 0.0  # per-beat period noise, seconds (std)
    noise_std: float = 0.0  # broadband trace noise (absolute)
    drift: float = 0.0  # slow intensity drift amplitude
    pulse_strength_per_channel: Optional[tuple] = None
    seed: int = 0

    def __post_init__(self):
        if not 42.0 <= self.hr_bpm <= 180.0:
            raise RejectedInputError(f"hr {self.hr_bpm} outside [42, 180] bpm")
        if self.fs < 12.0:
            raise RejectedInputError(f"fs {self.fs} too low for a 3 Hz band")
        if self.t_frames < 9:
            raise RejectedInputError("t_frames must be >= 9")


def pulse_reference(cfg: SynthConfig) -> float:
    """Reference pulse amplitude: green-channel strength x template RMS.

    Noise levels in the acceptance protocol are stated as multiples of
    this value.
    """
    strengths = cfg.pulse_strength_per_channel or tuple(
        DEFAULT_PULSE_STRENGTH[c] for c in ("R", "G", "B")
    )
    template_rms = np.sqrt(sum(a * a for a in cfg.harmonic_amps) / 2.0)
    return float(max(strengths) * template_rms)


def gen_bvp(cfg: SynthConfig) -> tuple[TimeSeries, float]:
    """Generate a quasi-periodic BVP waveform and its true mean HR.

    Beats are laid out sequentially with per-beat period jitter; within a
    beat the waveform is the fixed harmonic template evaluated at the
    beat phase. Returns ``(bvp, hr_bpm)`` where hr is 60 over the mean
    realized period (exactly ``cfg.hr_bpm`` at zero jitter).
    """
    rng = np.random.default_rng(cfg.seed)
    duration = cfg.t_frames / cfg.fs
    nominal = 60.0 / cfg.hr_bpm

    starts = [0.0]
    periods = []
    while starts[-1] < duration:
        p = nominal + rng.normal(0.0, cfg.hrv_jitter) if cfg.hrv_jitter > 0 else nominal
        p = float(np.clip(p, 60.0 / 220.0, 60.0 / 30.0))
        periods.append(p)
        starts.append(starts[-1] + p)

    t = np.arange(cfg.t_frames) / cfg.fs
    edges = np.asarray(starts)
    beat = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, len(periods) - 1)
    phase = (t - edges[beat]) / np.asarray(periods)[beat]

    x = np.zeros_like(t)
    for h, (amp, ph) in enumerate(zip(cfg.harmonic_amps, HARMONIC_PHASES)):
        x += amp * np.sin(2.0 * np.pi * (h + 1) * phase + ph)
    hr_true = 60.0 / float(np.mean(periods))
    return TimeSeries(x, cfg.fs), hr_true


def gen_traces(
    cfg: SynthConfig,
    n_rois: int = 4,
    channel_names: Sequence[str] = DEFAULT_CHANNELS[:3],
    subject_id: str = "synth",
) -> tuple[RoiTraceSet, TimeSeries, float]:
    """Generate an ROI trace set around a shared BVP.

    Each (ROI, channel) trace is baseline + pulse_strength * bvp with a
    per-ROI gain, plus one global slow drift sinusoid added identically
    to every channel (so chrominance projections can cancel it) and
    white gaussian noise. Y/U/V channels, when requested, are derived
    from the noisy R/G/B.
    """
    rng = np.random.default_rng(cfg.seed + 1)
    bvp, hr_true = gen_bvp(cfg)
    t = np.arange(cfg.t_frames) / cfg.fs

    drift_freq = rng.uniform(0.2, 0.4)
    drift_phase = rng.uniform(0.0, 2.0 * np.pi)
    drift = cfg.drift * np.sin(2.0 * np.pi * drift_freq * t + drift_phase)
    roi_gain = rng.uniform(0.8, 1.2, size=n_rois)

    strengths = dict(DEFAULT_PULSE_STRENGTH)
    if cfg.pulse_strength_per_channel is not None:
        strengths = dict(zip("RGB", cfg.pulse_strength_per_channel))

    rgb = np.empty((n_rois, 3, cfg.t_frames))
    for r in range(n_rois):
        for c, name in enumerate("RGB"):
            pulse = strengths[name] * roi_gain[r] * bvp.samples
            noise = cfg.noise_std * rng.standard_normal(cfg.t_frames)
            rgb[r, c] = DEFAULT_BASELINE[name] + pulse + drift + noise

    values = np.empty((n_rois, len(channel_names), cfg.t_frames))
    for c, name in enumerate(channel_names):
        values[:, c] = _channel_from_rgb(rgb, name)
    traces = RoiTraceSet(values, cfg.fs, subject_id, tuple(channel_names))
    return traces, bvp, hr_true


def _channel_from_rgb(rgb: np.ndarray, name: str) -> np.ndarray:
    r, g, b = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    name = name.upper()
    if name == "R":
        return r
    if name == "G":
        return g
    if name == "B":
        return b
    y = 0.299 * r + 0.587 * g + 0.114 * b
    if name == "Y":
        return y
    if name == "U":
        return 0.492 * (b - y)
    if name == "V":
        return 0.877 * (r - y)
    raise RejectedInputError(f"unknown channel name {name!r}")


@dataclass(frozen=True)
class LabeledSample:
    """One training/evaluation window with ground truth."""

    traces: RoiTraceSet
    bvp: TimeSeries
    hr_bpm: float
    subject_id: str
    window_id: str


def gen_benchmark(
    n_subjects: int = 10,
    windows_per_subject: int = 3,
    split_seed: int = 0,
    base: Optional[SynthConfig] = None,
    n_rois: int = 4,
    channel_names: Sequence[str] = DEFAULT_CHANNELS[:3],
) -> list[LabeledSample]:
    """Generate a subject-structured labeled benchmark.

    Each subject gets one HR drawn uniformly from [50, 150] bpm, fixed
    across that subject's windows up to HRV jitter. Deterministic per
    ``split_seed``.
    """
    if base is None:
        base = SynthConfig(hrv_jitter=0.015, noise_std=0.0, drift=0.004)
    root = np.random.SeedSequence(split_seed)
    subject_seqs = root.spawn(n_subjects)
    samples = []
    for s, seq in enumerate(subject_seqs):
        rng = np.random.default_rng(seq)
        hr = float(rng.uniform(50.0, 150.0))
        window_seeds = rng.integers(0, 2**31 - 1, size=windows_per_subject)
        subject_id = f"s{s:03d}"
        for w, wseed in enumerate(window_seeds):
            cfg = replace(base, hr_bpm=hr, seed=int(wseed))
            traces, bvp, hr_true = gen_traces(
                cfg, n_rois=n_rois, channel_names=channel_names,
                subject_id=subject_id,
            )
            samples.append(
                LabeledSample(traces, bvp, hr_true, subject_id, f"{subject_id}_w{w:02d}")
            )
    return samples


def save_benchmark(out_dir, samples: list[LabeledSample]) -> None:
    """Write per-window trace CSVs, BVP CSVs and a labels.json index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for sample in samples:
        stem = sample.window_id
        write_traces_csv(out / f"{stem}.csv", sample.traces)
        bvp_lines = ["frame,value"] + [
            f"{i},{float(v)!r}" for i, v in enumerate(sample.bvp.samples)
        ]
        (out / f"{stem}_bvp.csv").write_text("\n".join(bvp_lines) + "\n")
        index.append(
            {
                "window_id": stem,
                "subject_id": sample.subject_id,
                "hr_bpm": sample.hr_bpm,
                "fs": sample.traces.fs,
                "traces_csv": f"{stem}.csv",
                "bvp_csv": f"{stem}_bvp.csv",
            }
        )
    (out / "labels.json").write_text(json.dumps(index, indent=1, sort_keys=True))


def load_benchmark(in_dir) -> list[LabeledSample]:
    """Read a benchmark directory written by :func:`save_benchmark`."""
    root = Path(in_dir)
    index = json.loads((root / "labels.json").read_text())
    samples = []
    for entry in index:
        traces = read_traces_csv(root / entry["traces_csv"])
        bvp_vals = []
        with open(root / entry["bvp_csv"]) as f:
            f.readline()
            for line in f:
                line = line.strip()
                if line:
                    bvp_vals.append(float(line.split(",")[1]))
        samples.append(
            LabeledSample(
                traces,
                TimeSeries(np.asarray(bvp_vals), entry["fs"]),
                float(entry["hr_bpm"]),
                entry["subject_id"],
                entry["window_id"],
            )
        )
    return samples

"""Generator tests: spectral self-consistency, determinism, benchmark structure."""

import numpy as np
import pytest

from pulsebench.errors import RejectedInputError
from pulsebench.synth import (
    HARMONIC_AMPS,
    LabeledSample,
    SynthConfig,
    gen_benchmark,
    gen_bvp,
    gen_traces,
    load_benchmark,
    pulse_reference,
    save_benchmark,
)
from pulsebench.timeseries import HR_BAND, dominant_hr, psd
from pulsebench.traditional import TraditionalMethod, chrom, pseudo_hr, rgb_from_traces


class TestGenBvp:
    def test_zero_jitter_spectral_match(self):
        bvp, hr = gen_bvp(SynthConfig(hr_bpm=72.0, seed=1))
        assert hr == 72.0
        assert abs(dominant_hr(psd(bvp), HR_BAND) - 72.0) <= 0.5

    def test_spectral_match_across_rates(self):
        for hr_req in (55.0, 95.0, 140.0):
            bvp, hr = gen_bvp(SynthConfig(hr_bpm=hr_req, seed=2))
            assert abs(dominant_hr(psd(bvp), HR_BAND) - hr) <= 1.0

    def test_amplitude_scaling_leaves_hr(self):
        bvp, _ = gen_bvp(SynthConfig(hr_bpm=84.0, seed=3))
        from pulsebench.timeseries import TimeSeries

        scaled = TimeSeries(bvp.samples * 7.3, bvp.fs)
        assert dominant_hr(psd(bvp), HR_BAND) == pytest.approx(
            dominant_hr(psd(scaled), HR_BAND)
        )

    def test_seed_determinism_and_variation(self):
        a, hr_a = gen_bvp(SynthConfig(hr_bpm=100.0, seed=5, hrv_jitter=0.02))
        b, hr_b = gen_bvp(SynthConfig(hr_bpm=100.0, seed=5, hrv_jitter=0.02))
        c, hr_c = gen_bvp(SynthConfig(hr_bpm=100.0, seed=6, hrv_jitter=0.02))
        np.testing.assert_array_equal(a.samples, b.samples)
        assert hr_a == hr_b
        assert not np.array_equal(a.samples, c.samples)
        assert abs(hr_a - hr_c) <= 5.0  # same nominal rate within jitter

    def test_harmonic_constants(self):
        assert HARMONIC_AMPS == (1.0, 0.35, 0.2)

    def test_hr_range_enforced(self):
        with pytest.raises(RejectedInputError):
            SynthConfig(hr_bpm=200.0)


class TestGenTraces:
    def test_noise_free_chrom_recovery(self):
        traces, _, hr = gen_traces(
            SynthConfig(hr_bpm=77.0, seed=7, noise_std=0.0, drift=0.003)
        )
        sig = chrom(rgb_from_traces(traces))
        assert abs(dominant_hr(psd(sig), HR_BAND) - hr) <= 1.0

    def test_zero_pulse_flagged_unreliable(self):
        ref = pulse_reference(SynthConfig())
        traces, _, _ = gen_traces(
            SynthConfig(
                hr_bpm=77.0, seed=8, noise_std=ref,
                pulse_strength_per_channel=(0.0, 0.0, 0.0),
            )
        )
        label = pseudo_hr(traces, TraditionalMethod.CHROM)
        assert not label.reliable

    def test_confidence_monotone_over_noise_grid(self):
        ref = pulse_reference(SynthConfig())
        confs = []
        for mult in (0.0, 0.5, 1.0, 2.0, 4.0):
            traces, _, _ = gen_traces(
                SynthConfig(hr_bpm=72.0, seed=9, noise_std=mult * ref, drift=0.004)
            )
            confs.append(pseudo_hr(traces, TraditionalMethod.CHROM).confidence)
        assert all(a >= b for a, b in zip(confs, confs[1:]))

    def test_channel_names_derived(self):
        traces, _, _ = gen_traces(
            SynthConfig(seed=10), channel_names=("R", "G", "B", "Y", "U", "V")
        )
        assert traces.values.shape[1] == 6
        r, g, b = traces.values[0, 0], traces.values[0, 1], traces.values[0, 2]
        np.testing.assert_allclose(
            traces.values[0, 3], 0.299 * r + 0.587 * g + 0.114 * b, atol=1e-12
        )


class TestBenchmark:
    def test_fold_structure(self):
        from pulsebench.harness import kfold_split

        samples = gen_benchmark(10, 2, split_seed=1)
        subjects = {s.subject_id for s in samples}
        assert len(subjects) == 10
        folds = kfold_split([s.subject_id for s in samples], 5, seed=0)
        assert all(len(f) == 2 for f in folds)
        seen = [s for f in folds for s in f]
        assert sorted(seen) == sorted(subjects)

    def test_subject_hr_fixed_within_subject(self):
        samples = gen_benchmark(4, 3, split_seed=2)
        by_subject = {}
        for s in samples:
            by_subject.setdefault(s.subject_id, []).append(s.hr_bpm)
        for hrs in by_subject.values():
            assert max(hrs) - min(hrs) <= 6.0  # only HRV jitter

    def test_hr_in_range(self):
        samples = gen_benchmark(12, 1, split_seed=3)
        assert all(45.0 <= s.hr_bpm <= 155.0 for s in samples)

    def test_regeneration_identical(self, tmp_path):
        a = gen_benchmark(3, 2, split_seed=4)
        b = gen_benchmark(3, 2, split_seed=4)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.traces.values, y.traces.values)
            assert x.hr_bpm == y.hr_bpm

    def test_files_byte_identical_across_regenerations(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        save_benchmark(d1, gen_benchmark(2, 1, split_seed=5))
        save_benchmark(d2, gen_benchmark(2, 1, split_seed=5))
        for f1 in sorted(d1.iterdir()):
            f2 = d2 / f1.name
            assert f1.read_bytes() == f2.read_bytes(), f1.name

    def test_labels_roundtrip_through_files(self, tmp_path):
        samples = gen_benchmark(3, 2, split_seed=6)
        save_benchmark(tmp_path, samples)
        loaded = load_benchmark(tmp_path)
        assert len(loaded) == len(samples)
        by_id = {s.window_id: s for s in loaded}
        for s in samples:
            out = by_id[s.window_id]
            assert out.hr_bpm == pytest.approx(s.hr_bpm)
            assert out.subject_id == s.subject_id
            np.testing.assert_allclose(out.traces.values, s.traces.values)
            np.testing.assert_allclose(out.bvp.samples, s.bvp.samples)

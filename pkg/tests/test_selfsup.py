"""Self-supervision tests: masking exactness/uniformity, pretext sample
invariants, pretrain/probe/transfer protocol behavior."""

import numpy as np
import pytest
import torch

from pulsebench.errors import ConfigError, RejectedInputError
from pulsebench.harness import TrainConfig, required_height_multiple
from pulsebench.losses import total_loss_t, unstack_image_t
from pulsebench.model import ModelConfig, init_params, load_checkpoint, forward
from pulsebench.mstmap import build_mstmap, stack_square
from pulsebench.selfsup import (
    MaskSpec,
    PretextConfig,
    build_pretext_samples,
    linear_probe,
    make_pbvp_sample,
    make_pretext_sample,
    mask_patches,
    prepared_from_pretext,
    pretrain,
    transfer,
)
from pulsebench.synth import SynthConfig, gen_benchmark, gen_traces, pulse_reference
from pulsebench.traditional import TraditionalMethod

BENCH_MODEL = ModelConfig(
    input_hw=(48, 96), in_channels=3, window_size=2,
    embed_dim=16, depths=(2, 2), n_heads=(2, 4),
)
PAD = required_height_multiple(BENCH_MODEL)
PULSE = pulse_reference(SynthConfig())


def clean_traces(hr=72.0, seed=0, t=288, noise_mult=0.2):
    cfg = SynthConfig(
        hr_bpm=hr, t_frames=t, seed=seed, hrv_jitter=0.01,
        noise_std=noise_mult * PULSE, drift=0.004,
    )
    return gen_traces(cfg, n_rois=4)


def small_benchmark(n_subjects, windows, seed, t=288):
    base = SynthConfig(
        t_frames=t, hrv_jitter=0.01, noise_std=0.3 * PULSE, drift=0.004
    )
    return gen_benchmark(n_subjects, windows, split_seed=seed, base=base, n_rois=4)


class TestMaskSpec:
    def test_ratio_bounds(self):
        with pytest.raises(RejectedInputError):
            MaskSpec(ratio=0.0)
        with pytest.raises(RejectedInputError):
            MaskSpec(ratio=1.0)

    def test_exact_count_192(self):
        assert MaskSpec().n_masked(2304) == 1728

    def test_tiny_ratio_masks_at_least_one(self):
        assert MaskSpec(ratio=0.001).n_masked(4) == 1


class TestMaskPatches:
    def _stacked(self, seed=0):
        traces, _, _ = clean_traces(seed=seed)
        return stack_square(build_mstmap(traces), 3, PAD)

    def test_exact_count_and_zeroing(self):
        s = self._stacked()
        masked, layout = mask_patches(s, MaskSpec(seed=3))
        gh, gw = s.image.shape[0] // 4, s.image.shape[1] // 4
        assert layout.shape == (gh, gw)
        assert int(layout.sum()) == MaskSpec().n_masked(gh * gw)
        px = np.repeat(np.repeat(layout, 4, 0), 4, 1)
        assert np.all(masked.image[px] == 0.0)
        np.testing.assert_array_equal(masked.image[~px], s.image[~px])

    def test_same_seed_same_layout(self):
        s = self._stacked()
        _, a = mask_patches(s, MaskSpec(seed=9))
        _, b = mask_patches(s, MaskSpec(seed=9))
        np.testing.assert_array_equal(a, b)
        _, c = mask_patches(s, MaskSpec(seed=10))
        assert not np.array_equal(a, c)

    def test_indivisible_dims_rejected(self):
        from pulsebench.mstmap import MapLayout, StackedMap

        layout = MapLayout("mstmap", 3, 10, 6, 30, 1, 2, 2, "channels", 30.0)
        s = StackedMap(np.zeros((6, 10, 1), dtype=np.float32), layout)
        with pytest.raises(RejectedInputError):
            mask_patches(s, MaskSpec(patch=4))

    def test_uniformity_over_seeds(self):
        # quick sanity at module scale; the full 10^4-seed binomial check
        # runs in the acceptance suite
        s = self._stacked()
        gh, gw = s.image.shape[0] // 4, s.image.shape[1] // 4
        counts = np.zeros(gh * gw)
        n_seeds = 400
        for seed in range(n_seeds):
            _, layout = mask_patches(s, MaskSpec(seed=seed))
            counts += layout.ravel()
        freq = counts / n_seeds
        sigma = np.sqrt(0.75 * 0.25 / n_seeds)
        assert np.all(np.abs(freq - 0.75) <= 5 * sigma)


class TestPretextSamples:
    def test_input_equals_target_outside_mask(self):
        traces, _, _ = clean_traces(seed=2)
        ps = make_pretext_sample(traces, MaskSpec(seed=1), pad_height_multiple=PAD)
        px = np.repeat(np.repeat(ps.mask_layout, 4, 0), 4, 1)
        np.testing.assert_array_equal(
            ps.input.image[~px], ps.target_map.image[~px]
        )
        assert np.all(ps.input.image[px] == 0.0)

    def test_self_consistency_loss_floor(self):
        # long window + low noise keep the conditioned rows genuinely
        # band-limited; the floor then sits well under the 0.02 budget
        traces, _, _ = clean_traces(seed=3, t=576, noise_mult=0.2)
        ps = make_pretext_sample(traces, MaskSpec(seed=2), pad_height_multiple=PAD)
        rows = unstack_image_t(
            torch.from_numpy(ps.target_map.image).to(torch.float64),
            ps.target_map.layout,
        )
        _, br = total_loss_t(rows, None, rows.clone(), None, traces.fs)
        assert br.l_freq == 0.0
        assert br.l_temp <= 0.02

    def test_pseudo_label_near_truth(self):
        traces, _, hr = clean_traces(hr=72.0, seed=4, t=576)
        ps = make_pretext_sample(traces, MaskSpec(seed=3), pad_height_multiple=PAD)
        assert ps.hr_label.reliable
        assert abs(ps.hr_label.hr_bpm - hr) <= 2.0

    def test_pbvp_sample_shapes_and_fidelity(self):
        traces, _, hr = clean_traces(hr=80.0, seed=5, t=576)
        ps = make_pbvp_sample(traces, pad_height_multiple=PAD)
        assert ps.input.image.shape == ps.target_map.image.shape
        assert ps.mask_layout is None
        rows = unstack_image_t(
            torch.from_numpy(ps.target_map.image).to(torch.float64),
            ps.target_map.layout,
        ).numpy()
        from pulsebench.timeseries import HR_BAND, Spectrum, dominant_hr, psd_power_rows

        for r in rows[::3]:
            power = psd_power_rows(r[np.newaxis])[0]
            spec = Spectrum(power, traces.fs / len(r), traces.fs)
            assert abs(dominant_hr(spec, HR_BAND) - hr) <= 3.0

    def test_unreliable_label_excluded(self):
        cfg = SynthConfig(
            hr_bpm=72.0, t_frames=288, seed=6, noise_std=2.0 * PULSE,
            pulse_strength_per_channel=(0.0, 0.0, 0.0),
        )
        traces, _, _ = gen_traces(cfg, n_rois=4)
        ps = make_pretext_sample(traces, MaskSpec(seed=4), pad_height_multiple=PAD)
        prepared = prepared_from_pretext(ps)
        assert prepared.hr_unit is None

    def test_image_task_variants(self):
        samples = small_benchmark(2, 1, seed=7)
        none_task = build_pretext_samples(
            samples, PretextConfig(image_task="none"), BENCH_MODEL
        )
        assert all(p.target_rows is None for p in none_task)
        masked = build_pretext_samples(
            samples, PretextConfig(image_task="mask"), BENCH_MODEL
        )
        assert all(p.target_rows is not None for p in masked)
        no_reg = build_pretext_samples(
            samples, PretextConfig(regression=None, image_task="mask"), BENCH_MODEL
        )
        assert all(p.hr_unit is None for p in no_reg)

    def test_masked_only_loss_fields(self):
        samples = small_benchmark(2, 1, seed=8)
        out = build_pretext_samples(
            samples,
            PretextConfig(image_task="mask", loss_on_masked_only=True),
            BENCH_MODEL,
        )
        assert all(p.loss_mask is not None and p.target_image is not None for p in out)

    def test_needs_at_least_one_task(self):
        with pytest.raises(ConfigError):
            PretextConfig(regression=None, image_task="none")


class TestPretrainProtocol:
    def test_pretrain_loss_decreases_and_checkpoint_loads(self, tmp_path):
        samples = small_benchmark(4, 2, seed=9)
        report, ckpt = pretrain(
            samples, PretextConfig(),
            TrainConfig(lr=1e-3, batch=4, max_steps=30, seed=0),
            BENCH_MODEL, out_dir=tmp_path,
        )
        totals = [c["total"] for c in report.loss_curve]
        assert np.mean(totals[-5:]) < np.mean(totals[:5])
        store, cfg, extra = load_checkpoint(ckpt)
        assert extra["pretext"] == "CHROM-mask"
        # name compatibility with a fresh supervised model
        fresh = init_params(cfg, 0)
        assert set(fresh.names()) == set(store.names())

    def test_masked_reconstruction_beats_zero_fill(self, tmp_path):
        # "error" is the reconstruction objective itself (the temporal +
        # frequency losses are offset-invariant, so raw pixel MSE would
        # penalize the model's free DC level, not its signal recovery)
        samples = small_benchmark(4, 2, seed=10)
        pc = PretextConfig(regression=None, image_task="mask")
        _, ckpt = pretrain(
            samples, pc,
            TrainConfig(lr=1e-3, batch=4, max_steps=80, seed=0),
            BENCH_MODEL, out_dir=tmp_path,
        )
        store, cfg, _ = load_checkpoint(ckpt)
        prepared = build_pretext_samples(samples, pc, cfg)
        fs = prepared[0].layout.fs

        def recon_loss(rows, target):
            _, br = total_loss_t(rows, None, target, None, fs)
            return br.l_temp + 5.0 * br.l_freq

        for p in prepared:
            target = torch.from_numpy(p.target_rows).to(torch.float64).unsqueeze(0)
            out = forward(p.image, store, cfg)
            rows_model = unstack_image_t(out.bvpmap_pred.to(torch.float64), p.layout)
            rows_zero = unstack_image_t(
                torch.from_numpy(p.image).to(torch.float64).unsqueeze(0), p.layout
            )
            assert recon_loss(rows_model, target) < recon_loss(rows_zero, target)

    def test_probe_freezes_all_but_final_fc(self, tmp_path):
        samples = small_benchmark(4, 1, seed=11)
        report, ckpt = pretrain(
            samples, PretextConfig(),
            TrainConfig(lr=1e-3, batch=4, max_steps=10, seed=0),
            BENCH_MODEL, out_dir=tmp_path,
        )
        before, _, _ = load_checkpoint(ckpt)
        labeled = small_benchmark(4, 2, seed=12)
        train_s = [s for s in labeled if s.subject_id <= "s001"]
        test_s = [s for s in labeled if s.subject_id > "s001"]
        probe_report = linear_probe(
            ckpt, train_s, test_s,
            TrainConfig(lr=1e-2, batch=4, max_steps=15, seed=0),
            out_dir=tmp_path, run_id="probe_t",
        )
        after, _, _ = load_checkpoint(tmp_path / "probe_t.ckpt")
        changed = [
            n for n in before.names()
            if not torch.equal(before[n], after[n])
        ]
        assert set(changed) <= {"hr_head.fc.weight", "hr_head.fc.bias"}
        assert changed  # the probed layer did move
        assert probe_report.pooled is not None

    def test_transfer_zero_steps_reproduces_pretrain_outputs(self, tmp_path):
        samples = small_benchmark(3, 1, seed=13)
        _, ckpt = pretrain(
            samples, PretextConfig(),
            TrainConfig(lr=1e-3, batch=4, max_steps=8, seed=0),
            BENCH_MODEL, out_dir=tmp_path,
        )
        store1, cfg1, _ = load_checkpoint(ckpt)
        store2, cfg2, _ = load_checkpoint(ckpt)
        from pulsebench.harness import prepare_supervised

        p = prepare_supervised(samples[0], cfg1)
        a = forward(p.image, store1, cfg1)
        b = forward(p.image, store2, cfg2)
        assert torch.equal(a.bvpmap_pred, b.bvpmap_pred)
        assert torch.equal(a.hr_pred, b.hr_pred)

    def test_transfer_report_provenance(self, tmp_path):
        samples = small_benchmark(4, 1, seed=14)
        _, ckpt = pretrain(
            samples, PretextConfig(),
            TrainConfig(lr=1e-3, batch=4, max_steps=8, seed=0),
            BENCH_MODEL, out_dir=tmp_path, run_id="pre_xyz",
        )
        labeled = small_benchmark(4, 2, seed=15)
        train_s = [s for s in labeled if s.subject_id <= "s001"]
        test_s = [s for s in labeled if s.subject_id > "s001"]
        report = transfer(
            ckpt, train_s, test_s,
            TrainConfig(lr=1e-3, batch=4, max_steps=10, seed=0),
        )
        assert report.provenance["pretrain_run"] == "pre_xyz"
        assert report.kind == "transfer"

    def test_geometry_mismatch_rejected(self, tmp_path):
        samples = small_benchmark(3, 1, seed=16)
        _, ckpt = pretrain(
            samples, PretextConfig(),
            TrainConfig(lr=1e-3, batch=4, max_steps=5, seed=0),
            BENCH_MODEL, out_dir=tmp_path,
        )
        other = small_benchmark(3, 1, seed=17, t=192)
        with pytest.raises(ConfigError):
            transfer(ckpt, other, other, TrainConfig(max_steps=1, epochs=1))

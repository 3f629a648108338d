"""Masked-map pretext task assembly and the pretrain -> probe/transfer protocol.

Pre-training reuses the supervised losses and network unchanged; only the
input and the labels differ. The image task masks 75% of the stacked
MSTmap's 4x4 patches and reconstructs the full map (or, alternatively,
predicts a pseudo-BVP map built with a traditional method); the
regression task fits a traditional-method pseudo-HR. Downstream, a
checkpoint is evaluated by linear probing (only the head's final FC
trains) or by transfer (everything trains).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, RejectedInputError
from .harness import (
    PreparedSample,
    RunReport,
    TrainConfig,
    _config_snapshot,
    evaluate_prepared,
    model_config_for,
    prepare_supervised,
    required_height_multiple,
    run_training,
)
from .losses import LossWeights
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .mstmap import RoiTraceSet, StackedMap, build_mstmap, stack_square, unstack
from .synth import LabeledSample
from .timeseries import HR_BAND, FreqBand, hr_unit_from_bpm
from .traditional import (
    PseudoLabel,
    TraditionalMethod,
    build_pbvpmap,
    pseudo_hr,
)


@dataclass(frozen=True)
class MaskSpec:
    """Random patch-masking parameters."""

    ratio: float = 0.75
    patch: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise RejectedInputError(f"mask ratio {self.ratio} outside (0, 1)")
        if self.patch < 1:
            raise RejectedInputError("patch must be >= 1")

    def n_masked(self, n_patches: int) -> int:
        """Exact masked count: round(ratio * n), at least 1."""
        return max(1, int(round(self.ratio * n_patches)))


def mask_patch_indices(spec: MaskSpec, n_patches: int) -> np.ndarray:
    """Uniform without-replacement patch selection, deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    return rng.choice(n_patches, size=spec.n_masked(n_patches), replace=False)


def mask_patches(
    stacked: StackedMap, spec: MaskSpec
) -> tuple[StackedMap, np.ndarray]:
    """Zero out exactly round(ratio * n) patches across all channels.

    Returns the masked map and the boolean patch grid [H/p, W/p]
    (True = masked). Masked pixels take the value 0, the post-
    normalization floor.
    """
    h, w, _ = stacked.image.shape
    p = spec.patch
    if h % p or w % p:
        raise RejectedInputError(f"image {h}x{w} not divisible by patch {p}")
    gh, gw = h // p, w // p
    chosen = mask_patch_indices(spec, gh * gw)
    layout = np.zeros(gh * gw, dtype=bool)
    layout[chosen] = True
    layout = layout.reshape(gh, gw)
    image = stacked.image.copy()
    mask_px = np.repeat(np.repeat(layout, p, axis=0), p, axis=1)
    image[mask_px] = 0.0
    return StackedMap(image, stacked.layout), layout


@dataclass(frozen=True)
class PretextSample:
    """One self-supervised sample: masked input, full-map target, pseudo-HR."""

    input: StackedMap
    target_map: Optional[StackedMap]
    hr_label: Optional[PseudoLabel]
    mask_layout: Optional[np.ndarray]
    subject_id: str = ""
    window_id: str = ""


def make_pretext_sample(
    traces: RoiTraceSet,
    spec: MaskSpec,
    method: TraditionalMethod = TraditionalMethod.CHROM,
    band: FreqBand = HR_BAND,
    pad_height_multiple: Optional[int] = None,
    chunks: int = 3,
    rows_mode: str = "channels",
    window_id: str = "",
) -> PretextSample:
    """Masked-reconstruction sample: input is the masked stacked MSTmap,
    the target is the same map unmasked, and the HR pseudo-label comes
    from the chosen traditional method."""
    m = build_mstmap(traces, band)
    stacked = stack_square(m, chunks, pad_height_multiple, rows_mode)
    masked, layout = mask_patches(stacked, spec)
    label = pseudo_hr(traces, method, band)
    return PretextSample(
        masked, stacked, label, layout, traces.subject_id, window_id
    )


def make_pbvp_sample(
    traces: RoiTraceSet,
    method: TraditionalMethod = TraditionalMethod.CHROM,
    band: FreqBand = HR_BAND,
    pad_height_multiple: Optional[int] = None,
    chunks: int = 3,
    rows_mode: str = "channels",
    window_id: str = "",
) -> PretextSample:
    """PBVP-prediction sample: unmasked MSTmap in, pseudo-BVP map target."""
    m = build_mstmap(traces, band)
    stacked = stack_square(m, chunks, pad_height_multiple, rows_mode)
    pbvp = build_pbvpmap(traces, method, band)
    target = stack_square(pbvp, chunks, pad_height_multiple, rows_mode)
    label = pseudo_hr(traces, method, band)
    return PretextSample(
        stacked, target, label, None, traces.subject_id, window_id
    )


@dataclass(frozen=True)
class PretextConfig:
    """Which pretext tasks are active during pre-training."""

    regression: Optional[TraditionalMethod] = TraditionalMethod.CHROM
    image_task: str = "mask"  # "mask" | "pbvp" | "none"
    mask: MaskSpec = MaskSpec()
    loss_on_masked_only: bool = False

    def __post_init__(self):
        if self.image_task not in ("mask", "pbvp", "none"):
            raise ConfigError(f"unknown image task {self.image_task!r}")
        if self.regression is None and self.image_task == "none":
            raise ConfigError("pretext needs at least one task")

    def label(self) -> str:
        reg = self.regression.value.upper() if self.regression else "none"
        return f"{reg}-{self.image_task}"


def prepared_from_pretext(
    sample: PretextSample,
    loss_on_masked_only: bool = False,
    patch: int = 4,
) -> PreparedSample:
    """Adapt a pretext sample to the shared training-loop sample type.

    With ``loss_on_masked_only`` the unmasked pixels of the prediction
    are replaced by the target before the loss, so only masked patches
    carry a learning signal.
    """
    target_rows = None
    if sample.target_map is not None:
        target_rows = unstack(sample.target_map).rows
    hr_unit = None
    if sample.hr_label is not None and sample.hr_label.reliable:
        hr_unit = hr_unit_from_bpm(sample.hr_label.hr_bpm)
    loss_mask = target_image = None
    if loss_on_masked_only and sample.mask_layout is not None:
        loss_mask = np.repeat(
            np.repeat(sample.mask_layout, patch, axis=0), patch, axis=1
        )
        target_image = sample.target_map.image
    return PreparedSample(
        image=sample.input.image,
        target_rows=target_rows,
        hr_unit=hr_unit,
        subject_id=sample.subject_id,
        window_id=sample.window_id,
        layout=sample.input.layout,
        loss_mask=loss_mask,
        target_image=target_image,
    )


def build_pretext_samples(
    samples: list[LabeledSample],
    pretext: PretextConfig,
    model_cfg: ModelConfig,
    band: FreqBand = HR_BAND,
    chunks: int = 3,
) -> list[PreparedSample]:
    """Assemble pretext training samples from (unlabeled) trace windows.

    Ground-truth labels in ``samples`` are ignored; only traces are used.
    Mask seeds derive from the base spec seed and the window index so
    regeneration is deterministic.
    """
    pad = required_height_multiple(model_cfg)
    out = []
    for i, s in enumerate(samples):
        method = pretext.regression or TraditionalMethod.CHROM
        if pretext.image_task == "pbvp":
            ps = make_pbvp_sample(
                s.traces, method, band, pad, chunks, window_id=s.window_id
            )
        else:
            spec = replace(pretext.mask, seed=pretext.mask.seed + i)
            ps = make_pretext_sample(
                s.traces, spec, method, band, pad, chunks, window_id=s.window_id
            )
            if pretext.image_task == "none":
                ps = replace(
                    ps, input=ps.target_map, target_map=None, mask_layout=None
                )
        if pretext.regression is None:
            ps = replace(ps, hr_label=None)
        out.append(
            prepared_from_pretext(
                ps, pretext.loss_on_masked_only, pretext.mask.patch
            )
        )
    return out


def pretrain(
    samples: list[LabeledSample],
    pretext: PretextConfig,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    weights: LossWeights = LossWeights(),
    band: FreqBand = HR_BAND,
    chunks: int = 3,
    out_dir=None,
    run_id: str = "pretrain",
) -> tuple[RunReport, str]:
    """Self-supervised pre-training; emits a checkpoint and loss curves."""
    prepared = build_pretext_samples(samples, pretext, model_cfg, band, chunks)
    cfg = model_config_for(prepared[0], model_cfg)
    store = init_params(cfg, train_cfg.seed)
    curve = run_training(prepared, store, cfg, train_cfg, weights, band)

    out = Path(out_dir) if out_dir is not None else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = str(out / f"{run_id}.ckpt")
    save_checkpoint(ckpt_path, store, cfg, {"run_id": run_id,
                                            "pretext": pretext.label()})
    report = RunReport(
        kind="pretrain",
        config=_config_snapshot(
            train_cfg, cfg, weights, {"pretext": pretext.label()}
        ),
        loss_curve=curve,
        checkpoint_path=ckpt_path,
        provenance={
            "run_id": run_id,
            "n_samples": len(samples),
            "n_reliable_labels": sum(
                1 for p in prepared if p.hr_unit is not None
            ),
        },
    )
    report.save(out / f"{run_id}_report.json")
    report.write_csvs(out, run_id)
    return report, ckpt_path


PROBE_LAYER = "hr_head.fc"


def linear_probe(
    checkpoint_path,
    train_samples: list[LabeledSample],
    test_samples: list[LabeledSample],
    train_cfg: TrainConfig,
    weights: LossWeights = LossWeights(),
    band: FreqBand = HR_BAND,
    chunks: int = 3,
    out_dir=None,
    run_id: str = "probe",
) -> RunReport:
    """Retrain only the HR head's final FC layer on labeled data."""
    store, model_cfg, extra = load_checkpoint(checkpoint_path)
    if not model_cfg.with_hr_head:
        raise ConfigError("checkpoint has no HR head to probe")
    store.freeze_all_except(PROBE_LAYER)
    return _finetune(
        store, model_cfg, extra, train_samples, test_samples, train_cfg,
        weights, band, chunks, out_dir, run_id, kind="probe",
        checkpoint_path=checkpoint_path,
    )


def transfer(
    checkpoint_path,
    train_samples: list[LabeledSample],
    test_samples: list[LabeledSample],
    train_cfg: TrainConfig,
    weights: LossWeights = LossWeights(),
    band: FreqBand = HR_BAND,
    chunks: int = 3,
    out_dir=None,
    run_id: str = "transfer",
) -> RunReport:
    """Initialize from the checkpoint and retrain the whole network."""
    store, model_cfg, extra = load_checkpoint(checkpoint_path)
    store.unfreeze_all()
    return _finetune(
        store, model_cfg, extra, train_samples, test_samples, train_cfg,
        weights, band, chunks, out_dir, run_id, kind="transfer",
        checkpoint_path=checkpoint_path,
    )


def _finetune(
    store,
    model_cfg,
    ckpt_extra,
    train_samples,
    test_samples,
    train_cfg,
    weights,
    band,
    chunks,
    out_dir,
    run_id,
    kind,
    checkpoint_path,
) -> RunReport:
    prepared_train = [
        prepare_supervised(s, model_cfg, band, chunks=chunks)
        for s in train_samples
    ]
    prepared_test = [
        prepare_supervised(s, model_cfg, band, chunks=chunks)
        for s in test_samples
    ]
    got = prepared_train[0].image.shape
    want = (*model_cfg.input_hw, model_cfg.in_channels)
    if got != want:
        raise ConfigError(f"data geometry {got} != checkpoint geometry {want}")
    curve = run_training(
        prepared_train, store, model_cfg, train_cfg, weights, band
    )
    metrics, _ = evaluate_prepared(
        store, model_cfg, prepared_test,
        [s.hr_bpm for s in test_samples], train_cfg.readout, band,
    )
    report = RunReport(
        kind=kind,
        config=_config_snapshot(train_cfg, model_cfg, weights),
        pooled=metrics,
        loss_curve=curve,
        provenance={
            "run_id": run_id,
            "pretrain_run": ckpt_extra.get("run_id"),
            "pretrain_pretext": ckpt_extra.get("pretext"),
            "pretrain_checkpoint": str(checkpoint_path),
            "n_train": len(train_samples),
            "n_test": len(test_samples),
        },
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / f"{run_id}.ckpt"
        save_checkpoint(ckpt, store, model_cfg, {"run_id": run_id})
        report.checkpoint_path = str(ckpt)
        report.save(out / f"{run_id}_report.json")
        report.write_csvs(out, run_id)
    return report

"""Ablation suites mirroring the component / length / pretext studies.

Each suite runs a grid of configurations on the synthetic benchmark and
emits one comparison row per configuration (CSV + JSON), so the
directional claims (stacking helps, longer context helps, pre-training
helps) can be re-checked at desk scale.
"""

from __future__ import annotations

import json
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .harness import (
    RunReport,
    TrainConfig,
    _config_snapshot,
    evaluate_prepared,
    feasible_t,
    model_config_for,
    prepare_supervised,
    run_training,
)
from .losses import LossWeights
from .model import ModelConfig, init_params, without_decoder, without_hr_head
from .mstmap import window_samples
from .selfsup import PretextConfig, pretrain, transfer
from .synth import LabeledSample, SynthConfig, gen_benchmark, pulse_reference
from .timeseries import HR_BAND, TimeSeries
from .traditional import TraditionalMethod

SUITES = ("components", "length", "pretext")

PRETEXT_GRID = (
    (None, "none"),  # purely supervised baseline
    (TraditionalMethod.CHROM, "none"),
    (None, "mask"),
    (TraditionalMethod.CHROM, "mask"),
    (TraditionalMethod.GREEN, "mask"),
    (TraditionalMethod.LGI, "mask"),
    (TraditionalMethod.CHROM, "pbvp"),
)

LENGTH_GRID = (576, 384, 256)


@dataclass(frozen=True)
class AblationProtocol:
    """Desk-scale experiment sizes shared by all suites.

    ``readout`` picks the test-time HR estimate for variants that have
    both outputs. The spectral peak of the reconstructed map ("map") is
    the stabler desk-scale readout: the regression head generalizes from
    only a handful of distinct subject HRs here, which buries the
    directional effects these suites measure. Variants lacking one
    output fall back to the other automatically.
    """

    n_subjects: int = 8
    windows_per_subject: int = 2
    n_unlabeled_subjects: int = 6
    train_subjects: int = 5
    max_steps: int = 120
    lr: float = 1e-3
    batch: int = 8
    seed: int = 0
    noise_mult: float = 0.5
    t_frames: int = 576
    n_rois: int = 4
    readout: str = "map"


def default_model_config(protocol: AblationProtocol) -> ModelConfig:
    """Benchmark-sized model: 15 ROI subsets pad to 16 -> height 48."""
    w = feasible_t_width(protocol.t_frames)
    return ModelConfig(
        input_hw=(48, w),
        in_channels=3,
        window_size=2,
        embed_dim=16,
        depths=(2, 2),
        n_heads=(2, 4),
    )


def feasible_t_width(t: int, chunks: int = 3) -> int:
    return t // chunks


def benchmark_config(protocol: AblationProtocol) -> SynthConfig:
    ref = pulse_reference(SynthConfig())
    return SynthConfig(
        t_frames=protocol.t_frames,
        hrv_jitter=0.015,
        noise_std=protocol.noise_mult * ref,
        drift=0.004,
    )


def make_datasets(
    protocol: AblationProtocol,
) -> tuple[list[LabeledSample], list[LabeledSample], list[LabeledSample]]:
    """(labeled train, labeled test, unlabeled) benchmark splits."""
    base = benchmark_config(protocol)
    labeled = gen_benchmark(
        protocol.n_subjects, protocol.windows_per_subject,
        split_seed=protocol.seed + 600, base=base, n_rois=protocol.n_rois,
    )
    unlabeled = gen_benchmark(
        protocol.n_unlabeled_subjects, protocol.windows_per_subject,
        split_seed=protocol.seed + 500, base=base, n_rois=protocol.n_rois,
    )
    subjects = sorted({s.subject_id for s in labeled})
    train_ids = set(subjects[: protocol.train_subjects])
    train = [s for s in labeled if s.subject_id in train_ids]
    test = [s for s in labeled if s.subject_id not in train_ids]
    return train, test, unlabeled


def _train_eval(
    train,
    test,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    chunks: int = 3,
    init_store=None,
    weights: LossWeights = LossWeights(),
) -> RunReport:
    """One split: train (from scratch or a store) and report test metrics."""
    prepared_train = [
        prepare_supervised(s, model_cfg, chunks=chunks) for s in train
    ]
    prepared_test = [
        prepare_supervised(s, model_cfg, chunks=chunks) for s in test
    ]
    cfg = model_config_for(prepared_train[0], model_cfg)
    store = init_store if init_store is not None else init_params(cfg, train_cfg.seed)
    curve = run_training(prepared_train, store, cfg, train_cfg, weights)
    readout = train_cfg.readout
    if not cfg.with_hr_head:
        readout = "map"
    elif not cfg.with_decoder:
        readout = "head"
    metrics, _ = evaluate_prepared(
        store, cfg, prepared_test, [s.hr_bpm for s in test], readout
    )
    return RunReport(
        kind="ablation",
        config=_config_snapshot(train_cfg, cfg, weights),
        pooled=metrics,
        loss_curve=curve,
        provenance={"n_train": len(train), "n_test": len(test)},
    )


def _window_to_length(samples: list[LabeledSample], t: int) -> list[LabeledSample]:
    """Crop each benchmark window to its first t frames."""
    out = []
    for s in samples:
        wins = window_samples(s.traces, t, t)
        if not wins:
            continue
        out.append(
            LabeledSample(
                wins[0],
                TimeSeries(s.bvp.samples[:t], s.bvp.fs),
                s.hr_bpm,
                s.subject_id,
                f"{s.window_id}_t{t}",
            )
        )
    return out


def run_ablation(
    suite: str,
    protocol: AblationProtocol = AblationProtocol(),
    out_dir=None,
) -> list[dict]:
    """Run one suite; returns and optionally writes the comparison rows."""
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; pick one of {SUITES}")
    train, test, unlabeled = make_datasets(protocol)
    model_cfg = default_model_config(protocol)
    train_cfg = TrainConfig(
        lr=protocol.lr, batch=protocol.batch,
        max_steps=protocol.max_steps, seed=protocol.seed,
        readout=protocol.readout,
    )

    rows = []
    if suite == "components":
        variants = [
            ("full", model_cfg, 3),
            ("wo_hr_head", without_hr_head(model_cfg), 3),
            ("wo_decoder", without_decoder(model_cfg), 3),
            ("wo_stacking", model_cfg, 1),
        ]
        for name, cfg, chunks in variants:
            report = _train_eval(train, test, cfg, train_cfg, chunks=chunks)
            rows.append(_row(suite, name, report))
    elif suite == "length":
        for requested in LENGTH_GRID:
            t_eff = feasible_t(model_cfg, min(requested, protocol.t_frames))
            cfg = replace(model_cfg, input_hw=(48, t_eff // 3))
            report = _train_eval(
                _window_to_length(train, t_eff),
                _window_to_length(test, t_eff),
                cfg,
                train_cfg,
            )
            rows.append(
                _row(suite, f"T={requested}", report, {"effective_t": t_eff})
            )
    else:  # pretext
        with tempfile.TemporaryDirectory() as scratch:
            work = Path(out_dir) if out_dir else Path(scratch)
            for method, image_task in PRETEXT_GRID:
                name = (
                    f"{method.value.upper() if method else 'none'}-{image_task}"
                )
                if method is None and image_task == "none":
                    report = _train_eval(train, test, model_cfg, train_cfg)
                else:
                    pretext = PretextConfig(
                        regression=method, image_task=image_task
                    )
                    _, ckpt = pretrain(
                        unlabeled, pretext, train_cfg, model_cfg,
                        out_dir=work, run_id=f"pretext_{name}",
                    )
                    report = transfer(ckpt, train, test, train_cfg)
                rows.append(_row(suite, name, report))

    if out_dir is not None:
        write_ablation_table(out_dir, suite, rows)
    return rows


def _row(suite, name, report: RunReport, extra: Optional[dict] = None) -> dict:
    m = report.pooled
    row = {
        "suite": suite,
        "config": name,
        "mae": m.mae,
        "rmse": m.rmse,
        "sd": m.sd,
        "pearson_r": m.pearson_r,
    }
    row.update(extra or {})
    return row


def write_ablation_table(out_dir, suite: str, rows: list[dict]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"ablation_{suite}.json").write_text(
        json.dumps(rows, indent=1, sort_keys=True)
    )
    cols = ["suite", "config", "mae", "rmse", "sd", "pearson_r"]
    lines = [",".join(cols)]
    for r in rows:
        vals = []
        for c in cols:
            v = r.get(c)
            vals.append("" if v is None else (v if isinstance(v, str) else repr(v)))
        lines.append(",".join(vals))
    (out / f"ablation_{suite}.csv").write_text("\n".join(lines) + "\n")

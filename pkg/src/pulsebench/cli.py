"""Command-line surface: synth | preprocess | baseline | train | pretrain |
probe | transfer | eval | ablate.

Every subcommand accepts ``--config`` (TOML or JSON), ``--seed`` and
``--out``. Config keys mirror the dataclass fields: sections ``train``,
``model``, ``weights``, ``protocol``, ``pretext``. Exit codes: 0 success,
2 config error, 3 data/format error, 4 numerical divergence.
"""

from __future__ import annotations

import json
import sys
from dataclasses import fields
from pathlib import Path

import click
import numpy as np

from .ablation import SUITES, AblationProtocol, default_model_config, run_ablation
from .errors import (
    ConfigError,
    DataFormatError,
    DivergenceError,
    NoPeakError,
    PulsebenchError,
    RejectedInputError,
)
from .harness import TrainConfig, evaluate, required_height_multiple, train_supervised
from .losses import LossWeights
from .model import ModelConfig
from .mstmap import (
    build_mstmap,
    read_traces_csv,
    stack_square,
    window_samples,
    write_map,
)
from .selfsup import MaskSpec, PretextConfig, linear_probe, pretrain, transfer
from .synth import SynthConfig, gen_benchmark, load_benchmark, save_benchmark
from .timeseries import HR_BAND
from .traditional import TraditionalMethod, pseudo_hr

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _load_config(path) -> dict:
    if path is None:
        return {}
    text = Path(path).read_bytes()
    if str(path).endswith(".json"):
        return json.loads(text)
    try:
        import tomllib  # py >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib
    return tomllib.loads(text.decode("utf-8"))


def _build(dc_type, section: dict, **overrides):
    known = {f.name for f in fields(dc_type)}
    bad = set(section) - known
    if bad:
        raise ConfigError(f"unknown {dc_type.__name__} keys: {sorted(bad)}")
    merged = {**section, **{k: v for k, v in overrides.items() if v is not None}}
    return dc_type(**merged)


def _configs(config_path, seed):
    raw = _load_config(config_path)
    train_cfg = _build(TrainConfig, raw.get("train", {}), seed=seed)
    model_section = raw.get("model", {})
    for key in ("input_hw", "depths", "n_heads"):
        if key in model_section:
            model_section[key] = tuple(model_section[key])
    model_cfg = (
        _build(ModelConfig, model_section)
        if model_section
        else default_model_config(AblationProtocol())
    )
    weights = _build(LossWeights, raw.get("weights", {}))
    return raw, train_cfg, model_cfg, weights


def _fail(exc: Exception, code: int):
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _guard(fn):
    try:
        fn()
    except (ConfigError, click.ClickException) as exc:
        _fail(exc, EXIT_CONFIG)
    except (RejectedInputError, DataFormatError, NoPeakError, FileNotFoundError) as exc:
        _fail(exc, EXIT_DATA)
    except DivergenceError as exc:
        _fail(exc, EXIT_DIVERGED)
    except PulsebenchError as exc:
        _fail(exc, EXIT_DATA)


@click.group()
def main():
    """Desk-scale rPPG benchmark pipeline."""


_common = [
    click.option("--config", "config_path", type=click.Path(exists=True),
                 default=None, help="TOML/JSON config file."),
    click.option("--seed", type=int, default=0, show_default=True),
    click.option("--out", "out_dir", type=click.Path(), default="runs",
                 show_default=True),
]


def common_options(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@main.command()
@common_options
@click.option("--subjects", type=int, default=8, show_default=True)
@click.option("--windows", type=int, default=2, show_default=True)
@click.option("--t-frames", type=int, default=576, show_default=True)
@click.option("--noise-mult", type=float, default=0.5, show_default=True,
              help="Broadband noise as a multiple of the pulse amplitude.")
def synth(config_path, seed, out_dir, subjects, windows, t_frames, noise_mult):
    """Generate a synthetic labeled benchmark (trace CSVs + labels.json)."""
    def run():
        protocol = AblationProtocol(seed=seed, t_frames=t_frames,
                                    noise_mult=noise_mult)
        from .ablation import benchmark_config

        base = benchmark_config(protocol)
        samples = gen_benchmark(subjects, windows, split_seed=seed, base=base,
                                n_rois=protocol.n_rois)
        save_benchmark(out_dir, samples)
        click.echo(f"wrote {len(samples)} windows to {out_dir}")
    _guard(run)


@main.command()
@common_options
@click.option("--traces", "traces_csv", type=click.Path(exists=True),
              required=True, help="Trace CSV (with JSON sidecar).")
@click.option("--stacked/--no-stacked", default=True, show_default=True)
def preprocess(config_path, seed, out_dir, traces_csv, stacked):
    """Build the conditioned MSTmap (optionally square-stacked) from traces."""
    def run():
        _, _, model_cfg, _ = _configs(config_path, seed)
        traces = read_traces_csv(traces_csv)
        m = build_mstmap(traces)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = Path(traces_csv).stem
        if stacked:
            s = stack_square(m, 3, required_height_multiple(model_cfg))
            path = out / f"{stem}_stacked.psumap"
            write_map(path, s)
            click.echo(f"wrote {path} shape={s.image.shape}")
        else:
            path = out / f"{stem}_mstmap.psumap"
            write_map(path, m)
            click.echo(f"wrote {path} shape={m.rows.shape}")
    _guard(run)


@main.command()
@common_options
@click.option("--traces", "traces_csv", type=click.Path(exists=True), required=True)
@click.option("--method", type=click.Choice([m.value for m in TraditionalMethod]),
              default="chrom", show_default=True)
@click.option("--t-frames", type=int, default=576, show_default=True)
@click.option("--stride", type=int, default=576, show_default=True)
def baseline(config_path, seed, out_dir, traces_csv, method, t_frames, stride):
    """Traditional-method HR per window, written as JSON."""
    def run():
        traces = read_traces_csv(traces_csv)
        meth = TraditionalMethod(method)
        results = []
        for i, window in enumerate(window_samples(traces, t_frames, stride)):
            label = pseudo_hr(window, meth, HR_BAND)
            results.append(
                {
                    "window": i,
                    "method": meth.value,
                    "hr_bpm": None if np.isnan(label.hr_bpm) else label.hr_bpm,
                    "confidence": label.confidence,
                    "reliable": label.reliable,
                }
            )
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{Path(traces_csv).stem}_{meth.value}.json"
        path.write_text(json.dumps(results, indent=1))
        click.echo(f"wrote {path} ({len(results)} windows)")
    _guard(run)


@main.command()
@common_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--k-folds", type=int, default=5, show_default=True)
def train(config_path, seed, out_dir, data_dir, k_folds):
    """Supervised cross-validated training on a benchmark directory."""
    def run():
        _, train_cfg, model_cfg, weights = _configs(config_path, seed)
        samples = load_benchmark(data_dir)
        report = train_supervised(
            samples, train_cfg, model_cfg, weights,
            k_folds=k_folds, out_dir=out_dir,
        )
        m = report.pooled
        click.echo(
            f"pooled: MAE={m.mae:.2f} RMSE={m.rmse:.2f} SD={m.sd:.2f} "
            f"r={'n/a' if m.pearson_r is None else f'{m.pearson_r:.3f}'}"
        )
    _guard(run)


def _pretext_from_config(raw: dict, seed: int) -> PretextConfig:
    section = dict(raw.get("pretext", {}))
    reg = section.pop("regression", "chrom")
    mask_section = section.pop("mask", {})
    return PretextConfig(
        regression=None if reg in (None, "none") else TraditionalMethod(reg),
        image_task=section.pop("image_task", "mask"),
        mask=_build(MaskSpec, mask_section, seed=seed),
        **section,
    )


@main.command("pretrain")
@common_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True,
              help="Unlabeled benchmark directory (labels ignored).")
def pretrain_cmd(config_path, seed, out_dir, data_dir):
    """Self-supervised pre-training; writes a checkpoint + report."""
    def run():
        raw, train_cfg, model_cfg, weights = _configs(config_path, seed)
        pretext = _pretext_from_config(raw, seed)
        samples = load_benchmark(data_dir)
        report, ckpt = pretrain(
            samples, pretext, train_cfg, model_cfg, weights, out_dir=out_dir
        )
        click.echo(f"checkpoint: {ckpt}")
        click.echo(f"final loss: {report.loss_curve[-1]['total']:.4f}")
    _guard(run)


def _split_samples(samples, train_fraction=0.75):
    subjects = sorted({s.subject_id for s in samples})
    n_train = max(1, min(len(subjects) - 1, int(len(subjects) * train_fraction)))
    train_ids = set(subjects[:n_train])
    return (
        [s for s in samples if s.subject_id in train_ids],
        [s for s in samples if s.subject_id not in train_ids],
    )


@main.command("probe")
@common_options
@click.option("--checkpoint", "ckpt", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
def probe_cmd(config_path, seed, out_dir, ckpt, data_dir):
    """Linear probe: retrain only the HR head's final FC layer."""
    def run():
        _, train_cfg, _, weights = _configs(config_path, seed)
        train_s, test_s = _split_samples(load_benchmark(data_dir))
        report = linear_probe(
            ckpt, train_s, test_s, train_cfg, weights, out_dir=out_dir
        )
        click.echo(f"probe MAE={report.pooled.mae:.2f}")
    _guard(run)


@main.command("transfer")
@common_options
@click.option("--checkpoint", "ckpt", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
def transfer_cmd(config_path, seed, out_dir, ckpt, data_dir):
    """Transfer learning: retrain the whole network from a checkpoint."""
    def run():
        _, train_cfg, _, weights = _configs(config_path, seed)
        train_s, test_s = _split_samples(load_benchmark(data_dir))
        report = transfer(
            ckpt, train_s, test_s, train_cfg, weights, out_dir=out_dir
        )
        click.echo(f"transfer MAE={report.pooled.mae:.2f}")
    _guard(run)


@main.command("eval")
@common_options
@click.option("--checkpoint", "ckpt", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
def eval_cmd(config_path, seed, out_dir, ckpt, data_dir):
    """Evaluate a checkpoint on non-overlapping test windows."""
    def run():
        _, train_cfg, _, _ = _configs(config_path, seed)
        samples = load_benchmark(data_dir)
        report = evaluate(ckpt, samples, train_cfg, out_dir=out_dir)
        m = report.pooled
        click.echo(f"eval: MAE={m.mae:.2f} RMSE={m.rmse:.2f}")
    _guard(run)


@main.command("ablate")
@common_options
@click.option("--suite", type=click.Choice(SUITES), required=True)
@click.option("--max-steps", type=int, default=120, show_default=True)
def ablate_cmd(config_path, seed, out_dir, suite, max_steps):
    """Run an ablation suite and write its comparison table."""
    def run():
        raw = _load_config(config_path)
        protocol = _build(
            AblationProtocol, raw.get("protocol", {}),
            seed=seed, max_steps=max_steps,
        )
        rows = run_ablation(suite, protocol, out_dir)
        for r in rows:
            click.echo(
                f"{r['config']:>14s}: MAE={r['mae']:.2f} RMSE={r['rmse']:.2f}"
            )
    _guard(run)


if __name__ == "__main__":
    main()

"""Training loop, optimizer, metrics, cross-validation and run reports.

The optimizer is AdamW with decoupled weight decay operating directly on
the named parameter store (frozen names are skipped). Evaluation follows
the windowed protocol: non-overlapping test windows, HR read out from the
regression head (or optionally from the spectral peak of the
reconstructed map) and compared with MAE / RMSE / SD / Pearson r under
subject-exclusive folds.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, DivergenceError, RejectedInputError
from .losses import LossWeights, total_loss_t, unstack_image_t
from .model import (
    ModelConfig,
    ParameterStore,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .mstmap import (
    MapLayout,
    build_bvpmap,
    build_mstmap,
    stack_square,
    window_samples,
)
from .synth import LabeledSample
from .timeseries import (
    HR_BAND,
    FreqBand,
    Spectrum,
    TimeSeries,
    dominant_hr,
    hr_bpm_from_unit,
    hr_unit_from_bpm,
    psd_power_rows,
)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule parameters (defaults per the protocol)."""

    lr: float = 5e-5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    batch: int = 8
    epochs: int = 50
    t_frames: int = 576
    stride: int = 30
    seed: int = 0
    max_steps: Optional[int] = None
    readout: str = "head"  # "head" | "map"

    def __post_init__(self):
        if min(self.lr, self.beta1, self.beta2, self.epsilon) <= 0:
            raise ConfigError("lr, betas and epsilon must be positive")
        if self.weight_decay < 0 or self.batch < 1 or self.epochs < 1:
            raise ConfigError("invalid weight_decay/batch/epochs")
        if self.readout not in ("head", "map"):
            raise ConfigError(f"unknown readout {self.readout!r}")


class AdamW:
    """Decoupled-weight-decay Adam on a ParameterStore."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.t = 0

    @torch.no_grad()
    def step(self, store: ParameterStore, grads: Optional[dict] = None) -> int:
        """Apply one update; returns the step count. Frozen names skipped."""
        cfg = self.cfg
        self.t += 1
        t = self.t
        if grads is None:
            grads = store.grads()
        for name, g in grads.items():
            if g is None or store.is_frozen(name):
                continue
            if not torch.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient in {name}")
            p = store[name]
            if name not in self.m:
                self.m[name] = torch.zeros_like(p)
                self.v[name] = torch.zeros_like(p)
            g = g.to(p.dtype)
            m = self.m[name].mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
            v = self.v[name].mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
            m_hat = m / (1 - cfg.beta1**t)
            v_hat = v / (1 - cfg.beta2**t)
            if cfg.weight_decay:
                p.mul_(1 - cfg.lr * cfg.weight_decay)
            p.addcdiv_(m_hat, v_hat.sqrt() + cfg.epsilon, value=-cfg.lr)
        return t


def adamw_step(
    store: ParameterStore,
    grads: dict,
    cfg: TrainConfig,
    optimizer: Optional[AdamW] = None,
) -> AdamW:
    """Single functional AdamW step; returns the (possibly new) state."""
    if optimizer is None:
        optimizer = AdamW(cfg)
    optimizer.step(store, grads)
    return optimizer


@dataclass(frozen=True)
class Metrics:
    """HR agreement metrics over a set of windows."""

    mae: float
    rmse: float
    sd: float
    pearson_r: Optional[float]  # None when undefined (zero variance)

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(d: dict) -> "Metrics":
        return Metrics(d["mae"], d["rmse"], d["sd"], d["pearson_r"])


def compute_metrics(pred_bpm: Sequence[float], true_bpm: Sequence[float]) -> Metrics:
    """MAE, RMSE, population SD of signed errors and Pearson r.

    Exactly equal sequences report r = 1 by convention; otherwise a
    zero-variance side leaves r undefined (None).
    """
    pred = np.asarray(pred_bpm, dtype=np.float64)
    true = np.asarray(true_bpm, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 1 or pred.size < 2:
        raise RejectedInputError("metrics need two equal-length lists (n >= 2)")
    err = pred - true
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err**2)))
    sd = float(np.std(err))
    if np.array_equal(pred, true):
        r = 1.0
    elif pred.std() == 0 or true.std() == 0:
        r = None
    else:
        r = float(np.corrcoef(pred, true)[0, 1])
    return Metrics(mae, rmse, sd, r)


def kfold_split(subjects: Sequence[str], k: int, seed: int = 0) -> list[list[str]]:
    """Partition subjects into k shuffled folds of near-equal size."""
    unique = sorted(set(subjects))
    if k < 2 or k > len(unique):
        raise ConfigError(f"k={k} invalid for {len(unique)} subjects")
    rng = np.random.default_rng(seed)
    order = [unique[i] for i in rng.permutation(len(unique))]
    base, extra = divmod(len(order), k)
    folds = []
    start = 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        folds.append(sorted(order[start : start + size]))
        start += size
    return folds


# ---------------------------------------------------------------------------
# sample preparation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PreparedSample:
    """Model-ready tensors for one window."""

    image: np.ndarray  # [H, W, C] float32 (stacked, possibly masked)
    target_rows: Optional[np.ndarray]  # [R, T] float32
    hr_unit: Optional[float]  # regression label on [0, 1], None = excluded
    subject_id: str
    window_id: str
    layout: MapLayout
    # When set, pixels outside the mask are replaced by the target image
    # before the loss, restricting the learning signal to masked patches.
    loss_mask: Optional[np.ndarray] = None  # [H, W] bool
    target_image: Optional[np.ndarray] = None  # [H, W, C] float32


def required_height_multiple(cfg: ModelConfig) -> int:
    """Stacked-image height divisor the model geometry needs."""
    return cfg.patch_size * cfg.window_size * 2 ** (cfg.n_stages - 1)


def feasible_t(cfg: ModelConfig, requested_t: int, chunks: int = 3) -> int:
    """Largest window length <= requested that stacks onto a valid grid."""
    unit = chunks * required_height_multiple(cfg)
    t = (requested_t // unit) * unit
    if t <= 0:
        raise ConfigError(
            f"no feasible window length <= {requested_t} (needs multiples of {unit})"
        )
    return t


def window_dataset(
    samples: list[LabeledSample], t: int, stride: int
) -> list[LabeledSample]:
    """Slice each labeled recording into training/eval windows of length t.

    Samples already exactly t frames long pass through unchanged; longer
    recordings yield one window every ``stride`` frames (the BVP label is
    sliced in lockstep). Shorter recordings are dropped with a warning
    from :func:`window_samples`.
    """
    out = []
    for s in samples:
        if s.traces.n_frames == t:
            out.append(s)
            continue
        starts = range(0, s.traces.n_frames - t + 1, stride)
        for w, start in enumerate(starts):
            out.append(
                LabeledSample(
                    s.traces.window(start, t),
                    TimeSeries(s.bvp.samples[start : start + t], s.bvp.fs),
                    s.hr_bpm,
                    s.subject_id,
                    f"{s.window_id}_w{w}",
                )
            )
    return out


def prepare_supervised(
    sample: LabeledSample,
    model_cfg: ModelConfig,
    band: FreqBand = HR_BAND,
    chunks: int = 3,
    rows_mode: str = "channels",
) -> PreparedSample:
    """Stacked MSTmap input, replicated-BVP target rows, scaled HR label."""
    m = build_mstmap(sample.traces, band)
    stacked = stack_square(
        m, chunks, required_height_multiple(model_cfg), rows_mode
    )
    bvpmap = build_bvpmap(
        sample.bvp, m.n_rows, t=m.n_frames, n_channels=m.n_channels, band=band
    )
    return PreparedSample(
        image=stacked.image,
        target_rows=bvpmap.rows,
        hr_unit=hr_unit_from_bpm(sample.hr_bpm),
        subject_id=sample.subject_id,
        window_id=sample.window_id,
        layout=stacked.layout,
    )


def model_config_for(prepared: PreparedSample, base: ModelConfig) -> ModelConfig:
    h, w, c = prepared.image.shape
    if (h, w) == base.input_hw and c == base.in_channels:
        return base
    return replace(base, input_hw=(h, w), in_channels=c)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _batch_tensors(batch: list[PreparedSample]):
    images = torch.from_numpy(np.stack([s.image for s in batch]))
    target_rows = None
    if all(s.target_rows is not None for s in batch):
        target_rows = torch.from_numpy(
            np.stack([s.target_rows for s in batch])
        ).to(torch.float64)
    labeled = [i for i, s in enumerate(batch) if s.hr_unit is not None]
    labels = None
    if labeled:
        labels = (
            labeled,
            torch.tensor(
                [batch[i].hr_unit for i in labeled], dtype=torch.float64
            ),
        )
    blend = None
    if all(s.loss_mask is not None and s.target_image is not None for s in batch):
        blend = (
            torch.from_numpy(np.stack([s.loss_mask for s in batch])),
            torch.from_numpy(np.stack([s.target_image for s in batch])),
        )
    return images, target_rows, labels, blend


def run_training(
    prepared: list[PreparedSample],
    store: ParameterStore,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    weights: LossWeights = LossWeights(),
    band: FreqBand = HR_BAND,
) -> list[dict]:
    """Optimize the store in place; returns the loss curve.

    Batches are drawn in a seeded shuffled order per epoch; the loop
    stops after ``epochs`` passes or ``max_steps`` steps. Non-finite
    losses or gradients abort with a diagnostic.
    """
    if not prepared:
        raise RejectedInputError("empty training set")
    layouts = {(s.layout.chunks, s.image.shape) for s in prepared}
    if len(layouts) != 1:
        raise RejectedInputError("mixed sample geometries in one run")
    fs = prepared[0].layout.fs
    optimizer = AdamW(train_cfg)
    curve: list[dict] = []
    step = 0
    max_steps = train_cfg.max_steps or train_cfg.epochs * max(
        1, int(np.ceil(len(prepared) / train_cfg.batch))
    )
    for epoch in range(10**9):
        order = np.random.default_rng(
            train_cfg.seed * 100003 + epoch
        ).permutation(len(prepared))
        for lo in range(0, len(order), train_cfg.batch):
            batch = [prepared[i] for i in order[lo : lo + train_cfg.batch]]
            images, target_rows, labels, blend = _batch_tensors(batch)
            out = forward(images, store, model_cfg)
            pred_rows = None
            if out.bvpmap_pred is not None and target_rows is not None:
                pred_image = out.bvpmap_pred.to(torch.float64)
                if blend is not None:
                    mask, target_image = blend
                    pred_image = torch.where(
                        mask.unsqueeze(-1),
                        pred_image,
                        target_image.to(torch.float64),
                    )
                pred_rows = unstack_image_t(pred_image, batch[0].layout)
            hr_pred = hr_label = None
            if out.hr_pred is not None and labels is not None:
                idx, lab = labels
                hr_pred = out.hr_pred.to(torch.float64)[idx]
                hr_label = lab
            total, breakdown = total_loss_t(
                pred_rows, hr_pred, target_rows, hr_label, fs, band, weights
            )
            if not np.isfinite(breakdown.total):
                raise DivergenceError(
                    f"non-finite loss at step {step}: {breakdown}"
                )
            store.zero_grad()
            total.backward()
            optimizer.step(store)
            curve.append(
                {
                    "step": step,
                    "total": breakdown.total,
                    "l_reg": breakdown.l_reg,
                    "l_temp": breakdown.l_temp,
                    "l_freq": breakdown.l_freq,
                }
            )
            step += 1
            if step >= max_steps:
                return curve
        if train_cfg.max_steps is None and epoch + 1 >= train_cfg.epochs:
            return curve


def predict_hr_bpm(
    store: ParameterStore,
    model_cfg: ModelConfig,
    prepared: PreparedSample,
    readout: str = "head",
    band: FreqBand = HR_BAND,
) -> float:
    """Single-window HR prediction in bpm."""
    with torch.no_grad():
        out = forward(prepared.image, store, model_cfg)
    if readout == "head":
        if out.hr_pred is None:
            raise ConfigError("model has no HR head; use readout='map'")
        return hr_bpm_from_unit(float(out.hr_pred[0]))
    if out.bvpmap_pred is None:
        raise ConfigError("model has no decoder; use readout='head'")
    rows = unstack_image_t(
        out.bvpmap_pred.to(torch.float64), prepared.layout
    )[0].numpy()
    power = psd_power_rows(rows.mean(axis=0)[np.newaxis])[0]
    spec = Spectrum(power, prepared.layout.fs / rows.shape[-1], prepared.layout.fs)
    return dominant_hr(spec, band)


def evaluate_prepared(
    store: ParameterStore,
    model_cfg: ModelConfig,
    samples: list[PreparedSample],
    true_bpm: Sequence[float],
    readout: str = "head",
    band: FreqBand = HR_BAND,
) -> tuple[Metrics, list[float]]:
    preds = [
        predict_hr_bpm(store, model_cfg, s, readout, band) for s in samples
    ]
    return compute_metrics(preds, list(true_bpm)), preds


# ---------------------------------------------------------------------------
# run reports
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    """Serializable record of one experiment."""

    kind: str
    config: dict
    fold_assignments: dict = field(default_factory=dict)
    per_fold: dict = field(default_factory=dict)  # fold -> Metrics
    pooled: Optional[Metrics] = None
    loss_curve: list = field(default_factory=list)
    checkpoint_path: Optional[str] = None
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.config,
            "fold_assignments": self.fold_assignments,
            "per_fold": {k: m.to_json() for k, m in self.per_fold.items()},
            "pooled": self.pooled.to_json() if self.pooled else None,
            "loss_curve": self.loss_curve,
            "checkpoint_path": self.checkpoint_path,
            "provenance": self.provenance,
        }

    @staticmethod
    def from_json(d: dict) -> "RunReport":
        return RunReport(
            kind=d["kind"],
            config=d["config"],
            fold_assignments=d.get("fold_assignments", {}),
            per_fold={
                k: Metrics.from_json(m) for k, m in d.get("per_fold", {}).items()
            },
            pooled=Metrics.from_json(d["pooled"]) if d.get("pooled") else None,
            loss_curve=d.get("loss_curve", []),
            checkpoint_path=d.get("checkpoint_path"),
            provenance=d.get("provenance", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @staticmethod
    def load(path) -> "RunReport":
        return RunReport.from_json(json.loads(Path(path).read_text()))

    def write_csvs(self, out_dir, stem: str) -> None:
        """Metrics and loss-curve CSVs for external plotting."""
        out = Path(out_dir)
        lines = ["fold,mae,rmse,sd,pearson_r"]
        for name, m in sorted(self.per_fold.items()):
            r = "" if m.pearson_r is None else repr(m.pearson_r)
            lines.append(f"{name},{m.mae!r},{m.rmse!r},{m.sd!r},{r}")
        if self.pooled is not None:
            m = self.pooled
            r = "" if m.pearson_r is None else repr(m.pearson_r)
            lines.append(f"pooled,{m.mae!r},{m.rmse!r},{m.sd!r},{r}")
        (out / f"{stem}_metrics.csv").write_text("\n".join(lines) + "\n")
        lines = ["step,total,l_reg,l_temp,l_freq"]
        for row in self.loss_curve:
            lines.append(
                f"{row['step']},{row['total']!r},{row['l_reg']!r},"
                f"{row['l_temp']!r},{row['l_freq']!r}"
            )
        (out / f"{stem}_loss_curve.csv").write_text("\n".join(lines) + "\n")


def _config_snapshot(train_cfg, model_cfg, weights, extras=None) -> dict:
    snap = {
        "train": asdict(train_cfg),
        "model": asdict(model_cfg),
        "loss_weights": asdict(weights),
    }
    snap.update(extras or {})
    return snap


def train_supervised(
    samples: list[LabeledSample],
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    weights: LossWeights = LossWeights(),
    band: FreqBand = HR_BAND,
    k_folds: int = 5,
    out_dir=None,
    chunks: int = 3,
    init_store: Optional[ParameterStore] = None,
    run_id: str = "supervised",
) -> RunReport:
    """Cross-validated supervised training on labeled windows.

    Every fold trains a model from scratch (or from ``init_store``) on
    the other folds and reports test metrics; pooled metrics aggregate
    all test predictions. Recordings longer than the window length are
    sliced per ``train_cfg.t_frames``/``stride``.
    """
    if not samples:
        raise RejectedInputError("empty training dataset")
    t_eff = feasible_t(model_cfg, min(train_cfg.t_frames,
                                      min(s.traces.n_frames for s in samples)),
                       chunks)
    samples = window_dataset(samples, t_eff, train_cfg.stride)
    prepared = [
        prepare_supervised(s, model_cfg, band, chunks=chunks) for s in samples
    ]
    cfg = model_config_for(prepared[0], model_cfg)
    folds = kfold_split([s.subject_id for s in samples], k_folds, train_cfg.seed)
    fold_assignments = {f"fold{i}": f for i, f in enumerate(folds)}

    per_fold = {}
    all_preds: list[float] = []
    all_true: list[float] = []
    first_curve: list = []
    ckpt_path = None
    for i, held_out in enumerate(folds):
        held = set(held_out)
        train_set = [p for p in prepared if p.subject_id not in held]
        test_idx = [j for j, p in enumerate(prepared) if p.subject_id in held]
        store = (
            init_store.clone() if init_store is not None
            else init_params(cfg, train_cfg.seed)
        )
        curve = run_training(train_set, store, cfg, train_cfg, weights, band)
        test_samples = [prepared[j] for j in test_idx]
        true = [samples[j].hr_bpm for j in test_idx]
        preds = [
            predict_hr_bpm(store, cfg, s, train_cfg.readout, band)
            for s in test_samples
        ]
        if len(preds) >= 2:
            per_fold[f"fold{i}"] = compute_metrics(preds, true)
        all_preds.extend(preds)
        all_true.extend(true)
        if i == 0:
            first_curve = curve
            if out_dir is not None:
                ckpt_path = str(Path(out_dir) / f"{run_id}_fold0.ckpt")
                save_checkpoint(ckpt_path, store, cfg, {"run_id": run_id})

    report = RunReport(
        kind="train",
        config=_config_snapshot(train_cfg, cfg, weights, {"k_folds": k_folds}),
        fold_assignments=fold_assignments,
        per_fold=per_fold,
        pooled=compute_metrics(all_preds, all_true),
        loss_curve=first_curve,
        checkpoint_path=ckpt_path,
        provenance={"run_id": run_id, "n_samples": len(samples)},
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.save(out / f"{run_id}_report.json")
        report.write_csvs(out, run_id)
    return report


def evaluate(
    checkpoint_path,
    samples: list[LabeledSample],
    train_cfg: TrainConfig = TrainConfig(),
    band: FreqBand = HR_BAND,
    chunks: int = 3,
    out_dir=None,
    run_id: str = "eval",
) -> RunReport:
    """Evaluate a checkpoint on non-overlapping windows of the dataset."""
    if not samples:
        raise RejectedInputError("empty evaluation dataset")
    store, model_cfg, extra = load_checkpoint(checkpoint_path)
    eval_t = feasible_t(
        model_cfg,
        min(train_cfg.t_frames, min(s.traces.n_frames for s in samples)),
        chunks,
    )
    windows: list[LabeledSample] = []
    for s in samples:
        for w, win in enumerate(
            window_samples(s.traces, eval_t, eval_t)
        ):
            bvp_win = s.bvp.samples[w * eval_t : (w + 1) * eval_t]
            windows.append(
                LabeledSample(
                    win,
                    TimeSeries(bvp_win, s.bvp.fs),
                    s.hr_bpm,
                    s.subject_id,
                    f"{s.window_id}_e{w}",
                )
            )
    if not windows:
        raise RejectedInputError("no evaluable windows in dataset")
    prepared = [
        prepare_supervised(w, model_cfg, band, chunks=chunks) for w in windows
    ]
    metrics, preds = evaluate_prepared(
        store, model_cfg, prepared,
        [w.hr_bpm for w in windows], train_cfg.readout, band,
    )
    report = RunReport(
        kind="eval",
        config=_config_snapshot(train_cfg, model_cfg, LossWeights()),
        pooled=metrics,
        checkpoint_path=str(checkpoint_path),
        provenance={
            "run_id": run_id,
            "source_run": extra.get("run_id"),
            "n_windows": len(windows),
        },
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.save(out / f"{run_id}_report.json")
        report.write_csvs(out, run_id)
    return report

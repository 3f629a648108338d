"""Training losses: maximum cross-correlation, spectral MSE, L1 regression.

The temporal loss rewards correlation between prediction and label at the
best circular lag (invariant to phase offsets); the frequency loss is the
squared error between row power spectra; the regression loss is plain L1
on unit-scaled HR. The total is their weighted sum.

Everything is implemented once, on torch tensors in float64, so the same
code path serves supervised training, self-supervised pre-training, the
numpy-facing API and the finite-difference checks. The spectral estimator
matches :mod:`pulsebench.timeseries` bin for bin.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import RejectedInputError
from .mstmap import MapLayout
from .timeseries import HR_BAND, FreqBand, TimeSeries

# Cross-correlation lag search range: +-2 s exceeds one period at the
# slowest in-band rate (42 bpm), so a true alignment is always reachable
# without letting unrelated beats line up.
MAX_LAG_SECONDS = 2.0


@dataclass(frozen=True)
class LossWeights:
    """Weights of the regression / temporal / frequency terms."""

    alpha: float = 5.0
    beta: float = 1.0
    gamma: float = 5.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise RejectedInputError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss components plus per-row diagnostics."""

    l_reg: float
    l_temp: float
    l_freq: float
    total: float
    row_mcc: tuple = ()
    degenerate_rows: tuple = ()


def band_mask_full(n: int, fs: float, band: FreqBand) -> torch.Tensor:
    """0/1 mask over the full (two-sided) DFT bins inside the band."""
    freqs = np.abs(np.fft.fftfreq(n, d=1.0 / fs))
    return torch.from_numpy(
        ((freqs >= band.lo) & (freqs <= band.hi)).astype(np.float64)
    )


def psd_rows_t(rows: torch.Tensor) -> torch.Tensor:
    """One-sided periodogram of each row; matches ``timeseries.psd``."""
    n = rows.shape[-1]
    z = rows - rows.mean(dim=-1, keepdim=True)
    p = torch.fft.rfft(z, dim=-1).abs() ** 2 / n
    scale = torch.full((p.shape[-1],), 2.0, dtype=rows.dtype)
    scale[0] = 1.0
    if n % 2 == 0:
        scale[-1] = 1.0
    return p * scale


def band_power_ratio_rows_t(
    rows: torch.Tensor, fs: float, band: FreqBand
) -> torch.Tensor:
    """In-band power fraction per row (C_pr); 0 where total power is 0."""
    p = psd_rows_t(rows)
    freqs = torch.arange(p.shape[-1], dtype=rows.dtype) * fs / rows.shape[-1]
    sel = (freqs >= band.lo) & (freqs <= band.hi)
    total = p.sum(dim=-1)
    safe = torch.where(total > 0, total, torch.ones_like(total))
    ratio = p[..., sel].sum(dim=-1) / safe
    return torch.where(total > 0, ratio, torch.zeros_like(ratio))


def mcc_rows_t(
    x: torch.Tensor,
    y: torch.Tensor,
    fs: float,
    band: FreqBand = HR_BAND,
    max_lag_s: float = MAX_LAG_SECONDS,
    cpr_source: str = "x",
    sigma_on: str = "bandpassed",
    fixed_lags: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Maximum cross-correlation per row of [R, T] tensors.

    The cross-spectrum is band-limited with a hard bin mask, transformed
    back, normalized by the signal deviations and maximized over circular
    lags within ``max_lag_s``, then scaled by the in-band power ratio.
    Ties pick the first maximizing lag (scanning -L..L) so the
    subgradient is deterministic. ``fixed_lags`` (indices into the lag
    scan) bypasses the argmax: finite-difference checks freeze the lag
    choice of the point under test, since the max itself is only
    subdifferentiable at ties.

    Returns ``(mcc, degenerate, lags)`` where degenerate marks rows whose
    deviation vanished (their mcc is 0) and lags are the chosen indices.
    """
    if x.shape != y.shape:
        raise RejectedInputError(f"shape mismatch {x.shape} vs {y.shape}")
    n = x.shape[-1]
    xm = x - x.mean(dim=-1, keepdim=True)
    ym = y - y.mean(dim=-1, keepdim=True)
    mask = band_mask_full(n, fs, band).to(x.dtype)

    fx = torch.fft.fft(xm, dim=-1)
    fy = torch.fft.fft(ym, dim=-1)
    if sigma_on == "bandpassed":
        sig_x = torch.fft.ifft(fx * mask, dim=-1).real
        sig_y = torch.fft.ifft(fy * mask, dim=-1).real
    elif sigma_on == "raw":
        sig_x, sig_y = xm, ym
    else:
        raise RejectedInputError(f"unknown sigma_on {sigma_on!r}")
    sx = sig_x.pow(2).mean(dim=-1).sqrt()
    sy = sig_y.pow(2).mean(dim=-1).sqrt()
    ok = (sx > 0) & (sy > 0)
    sx_safe = torch.where(ok, sx, torch.ones_like(sx))
    sy_safe = torch.where(ok, sy, torch.ones_like(sy))

    cross = torch.fft.ifft(fx * torch.conj(fy) * mask, dim=-1).real
    l_max = min(int(round(max_lag_s * fs)), n // 2)
    offsets = torch.arange(-l_max, l_max + 1) % n
    rho = cross[..., offsets] / (n * sx_safe * sy_safe).unsqueeze(-1)
    if fixed_lags is None:
        best = torch.argmax(rho, dim=-1)  # first maximal lag
    else:
        best = fixed_lags.reshape(rho.shape[:-1]).long()
    peak = torch.gather(rho, -1, best.unsqueeze(-1)).squeeze(-1)

    if cpr_source == "x":
        cpr = band_power_ratio_rows_t(xm, fs, band)
    elif cpr_source == "y":
        cpr = band_power_ratio_rows_t(ym, fs, band)
    elif cpr_source == "cross":
        freqs = torch.arange(n // 2 + 1, dtype=x.dtype) * fs / n
        cs = (fx * torch.conj(fy))[..., : n // 2 + 1].abs()
        sel = (freqs >= band.lo) & (freqs <= band.hi)
        tot = cs.sum(dim=-1)
        safe = torch.where(tot > 0, tot, torch.ones_like(tot))
        cpr = torch.where(tot > 0, cs[..., sel].sum(dim=-1) / safe,
                          torch.zeros_like(tot))
    else:
        raise RejectedInputError(f"unknown cpr_source {cpr_source!r}")

    mcc_vals = torch.where(ok, cpr * peak, torch.zeros_like(peak))
    return mcc_vals, ~ok, best


def l_temp_t(
    x: torch.Tensor,
    y: torch.Tensor,
    fs: float,
    band: FreqBand = HR_BAND,
    **mcc_kwargs,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """1 - mean over rows of the maximum cross-correlation.

    Returns ``(loss, row_mcc, degenerate)``.
    """
    row_mcc, degenerate, _ = mcc_rows_t(x, y, fs, band, **mcc_kwargs)
    return 1.0 - row_mcc.mean(), row_mcc, degenerate


def l_freq_t(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean over rows of the summed squared PSD difference."""
    if x.shape != y.shape:
        raise RejectedInputError(f"shape mismatch {x.shape} vs {y.shape}")
    diff = psd_rows_t(x) - psd_rows_t(y)
    return diff.pow(2).sum(dim=-1).mean()


def l_reg_t(pred: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """L1 regression loss (mean over any batch dimension)."""
    return (pred - label).abs().mean()


def unstack_image_t(image: torch.Tensor, layout: MapLayout) -> torch.Tensor:
    """Differentiable inverse of map stacking for [..., H, W, C] tensors.

    Mirrors :func:`pulsebench.mstmap.unstack`: vertical chunk blocks are
    re-concatenated along time, padding rows are dropped, and per-subset
    channels return to the row axis. Output is [..., R, T].
    """
    n_ch = layout.n_channels if layout.rows_mode == "channels" else 1
    blocks = []
    for k in range(layout.chunks):
        top = k * layout.per_chunk_padded
        block = image[..., top : top + layout.per_chunk, :, :]
        blocks.append(block.transpose(-1, -2))  # [..., S, C, W]
    rows = torch.cat(blocks, dim=-1)  # [..., S, C, T]
    return rows.reshape(
        *image.shape[:-3], layout.per_chunk * n_ch, layout.n_frames
    )


@dataclass(frozen=True)
class TargetBundle:
    """Reconstruction / regression targets for one or more samples.

    ``map_rows`` are the conditioned target signals [R, T] (or [B, R, T]);
    ``hr_label`` is unit-scaled, ``None`` when no reliable label exists
    (the regression term is then dropped).
    """

    map_rows: Optional[np.ndarray]
    hr_label: Optional[float]
    fs: float
    band: FreqBand = HR_BAND
    layout: Optional[MapLayout] = None


def total_loss_t(
    pred_rows: Optional[torch.Tensor],
    hr_pred: Optional[torch.Tensor],
    target_rows: Optional[torch.Tensor],
    hr_label: Optional[torch.Tensor],
    fs: float,
    band: FreqBand = HR_BAND,
    weights: LossWeights = LossWeights(),
    **mcc_kwargs,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted Eq.-style total on torch tensors; rows may be batched.

    Missing pieces contribute zero: no decoder output drops the map
    terms, no (reliable) HR label drops the regression term.
    """
    zero = torch.zeros((), dtype=torch.float64)
    row_mcc: tuple = ()
    degenerate: tuple = ()
    lt = lf = lr = zero
    if pred_rows is not None and target_rows is not None:
        flat_p = pred_rows.reshape(-1, pred_rows.shape[-1])
        flat_t = target_rows.reshape(-1, target_rows.shape[-1])
        lt, mcc_vals, degen = l_temp_t(flat_p, flat_t, fs, band, **mcc_kwargs)
        lf = l_freq_t(flat_p, flat_t)
        row_mcc = tuple(mcc_vals.detach().tolist())
        degenerate = tuple(torch.nonzero(degen).flatten().tolist())
    if hr_pred is not None and hr_label is not None:
        lr = l_reg_t(hr_pred, hr_label)
    total = weights.alpha * lr + weights.beta * lt + weights.gamma * lf
    lr_f, lt_f, lf_f = (float(v.detach()) for v in (lr, lt, lf))
    breakdown = LossBreakdown(
        l_reg=lr_f,
        l_temp=lt_f,
        l_freq=lf_f,
        total=weights.alpha * lr_f + weights.beta * lt_f + weights.gamma * lf_f,
        row_mcc=row_mcc,
        degenerate_rows=degenerate,
    )
    return total, breakdown


# ---------------------------------------------------------------------------
# numpy-facing wrappers (values and analytic gradients w.r.t. predictions)
# ---------------------------------------------------------------------------


def _as_rows_tensor(rows, requires_grad=False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(rows), dtype=torch.float64)
    if t.dim() != 2:
        raise RejectedInputError("expected a 2-D [R, T] array")
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def mcc(
    x: TimeSeries,
    y: TimeSeries,
    band: FreqBand = HR_BAND,
    **mcc_kwargs,
) -> float:
    """Maximum cross-correlation between two equal-length series."""
    if len(x) != len(y) or x.fs != y.fs:
        raise RejectedInputError("mcc needs equal length and fs")
    vals, _, _ = mcc_rows_t(
        torch.from_numpy(x.samples[np.newaxis]),
        torch.from_numpy(y.samples[np.newaxis]),
        x.fs,
        band,
        **mcc_kwargs,
    )
    return float(vals[0])


def l_temp(
    x_rows: np.ndarray,
    y_rows: np.ndarray,
    fs: float,
    band: FreqBand = HR_BAND,
    **mcc_kwargs,
) -> tuple[float, np.ndarray]:
    """Temporal loss and its gradient with respect to ``x_rows``."""
    xt = _as_rows_tensor(x_rows, requires_grad=True)
    yt = _as_rows_tensor(y_rows)
    loss, _, _ = l_temp_t(xt, yt, fs, band, **mcc_kwargs)
    loss.backward()
    return float(loss.detach()), xt.grad.numpy()


def l_freq(
    x_rows: np.ndarray, y_rows: np.ndarray
) -> tuple[float, np.ndarray]:
    """Frequency loss and its gradient with respect to ``x_rows``."""
    xt = _as_rows_tensor(x_rows, requires_grad=True)
    yt = _as_rows_tensor(y_rows)
    loss = l_freq_t(xt, yt)
    loss.backward()
    return float(loss.detach()), xt.grad.numpy()


def l_reg(hr_pred: float, hr_label: float) -> tuple[float, float]:
    """L1 loss and subgradient (0 at equality)."""
    err = hr_pred - hr_label
    grad = 0.0 if err == 0 else (1.0 if err > 0 else -1.0)
    return abs(err), grad


def total_loss(
    pred,
    target: TargetBundle,
    weights: LossWeights = LossWeights(),
    **mcc_kwargs,
):
    """Full loss on a model output against a target bundle.

    ``pred`` needs ``bvpmap_pred`` (stacked image, [H, W, C]) and/or
    ``hr_pred``; the target layout unstacks the prediction back to rows.
    Returns ``(breakdown, grad_map, grad_hr)`` with gradients of the
    total w.r.t. the stacked prediction image and the HR output (None
    where the corresponding input is absent).
    """
    pred_image = getattr(pred, "bvpmap_pred", None)
    hr_pred = getattr(pred, "hr_pred", None)

    image_t = None
    pred_rows = None
    if pred_image is not None and target.map_rows is not None:
        if target.layout is None:
            raise RejectedInputError("target bundle needs a layout to unstack")
        image_t = torch.as_tensor(
            np.asarray(pred_image), dtype=torch.float64
        ).clone().requires_grad_(True)
        pred_rows = unstack_image_t(image_t, target.layout)

    hr_t = None
    label_t = None
    if hr_pred is not None and target.hr_label is not None:
        hr_t = torch.as_tensor(
            np.asarray(hr_pred), dtype=torch.float64
        ).clone().requires_grad_(True)
        label_t = torch.as_tensor(float(target.hr_label), dtype=torch.float64)

    target_rows = (
        None
        if target.map_rows is None or pred_rows is None
        else torch.as_tensor(np.asarray(target.map_rows), dtype=torch.float64)
    )
    total, breakdown = total_loss_t(
        pred_rows, hr_t, target_rows, label_t,
        target.fs, target.band, weights, **mcc_kwargs,
    )
    if total.requires_grad:
        total.backward()
    grad_map = None if image_t is None else image_t.grad.numpy()
    grad_hr = None if hr_t is None else hr_t.grad.numpy()
    return breakdown, grad_map, grad_hr

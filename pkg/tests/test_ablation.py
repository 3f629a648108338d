"""Ablation runner tests (tiny budgets: structure, not learning quality)."""

import json

import pytest

from pulsebench.ablation import (
    PRETEXT_GRID,
    AblationProtocol,
    run_ablation,
)
from pulsebench.errors import ConfigError

FAST = AblationProtocol(
    n_subjects=4,
    windows_per_subject=1,
    n_unlabeled_subjects=2,
    train_subjects=2,
    max_steps=3,
    t_frames=192,
)


def test_unknown_suite_rejected():
    with pytest.raises(ConfigError):
        run_ablation("nonsense", FAST)


def test_components_suite_rows(tmp_path):
    rows = run_ablation("components", FAST, out_dir=tmp_path)
    assert [r["config"] for r in rows] == [
        "full", "wo_hr_head", "wo_decoder", "wo_stacking",
    ]
    assert all("mae" in r and "rmse" in r for r in rows)
    table = json.loads((tmp_path / "ablation_components.json").read_text())
    assert len(table) == len(rows)
    csv = (tmp_path / "ablation_components.csv").read_text().strip().splitlines()
    assert csv[0] == "suite,config,mae,rmse,sd,pearson_r"
    assert len(csv) == len(rows) + 1


def test_length_suite_rows(tmp_path):
    rows = run_ablation("length", FAST, out_dir=tmp_path)
    assert [r["config"] for r in rows] == ["T=576", "T=384", "T=256"]
    # windows are only 192 frames long here: every effective T caps there
    assert all(r["effective_t"] <= 192 for r in rows)


def test_pretext_grid_definition():
    labels = [
        f"{m.value.upper() if m else 'none'}-{task}" for m, task in PRETEXT_GRID
    ]
    assert labels == [
        "none-none", "CHROM-none", "none-mask", "CHROM-mask",
        "GREEN-mask", "LGI-mask", "CHROM-pbvp",
    ]


def test_pretext_suite_rows(tmp_path):
    rows = run_ablation("pretext", FAST, out_dir=tmp_path)
    assert len(rows) == len(PRETEXT_GRID)
    assert rows[0]["config"] == "none-none"
    assert (tmp_path / "ablation_pretext.csv").exists()

import json
import math

import pandas as pd
import pytest

from experiment import ExperimentReport, experiment_plans, run_experiment
from strategy import PlanMode


def report_with(scores, seeds=(0, 1)):
    report = ExperimentReport(seeds=list(seeds))
    report.scores = scores
    return report


def test_experiment_plans():
    plans = experiment_plans()
    assert list(plans) == ["baseline", "finetune", "apt"]
    assert plans["finetune"].mode is PlanMode.FINETUNE
    assert plans["apt"].mode is PlanMode.APT


def test_non_inferiority_uses_the_first_seed_and_margin():
    assert report_with({"baseline": {0: 10.0, 1: 30.0}, "apt": {0: 9.6, 1: 0.0}}).non_inferior
    assert not report_with({"baseline": {0: 10.0}, "apt": {0: 9.4}}, seeds=[0]).non_inferior
    assert not report_with({"baseline": {0: 10.0}, "apt": {0: float("nan")}}, seeds=[0]).non_inferior


def test_directional_check_uses_seed_means():
    report = report_with({"baseline": {0: 10.0, 1: 12.0}, "apt": {0: 9.0, 1: 14.0}})
    assert report.mean("apt") == 11.5
    assert report.directional
    assert not report_with({"baseline": {0: 10.0, 1: 12.0}, "apt": {0: 11.0, 1: 11.0}}).directional


def test_failed_runs_are_left_out_of_means():
    report = report_with({"baseline": {0: 10.0, 1: float("nan")}})
    assert report.mean("baseline") == 10.0
    assert math.isnan(report.mean("apt"))


def test_report_serialises():
    report = report_with({"baseline": {0: 10.0}, "apt": {0: 11.0}}, seeds=[0])
    data = report.to_dict()
    assert data["scores"] == {"baseline": {"0": 10.0}, "apt": {"0": 11.0}}
    assert data["non_inferior"] and data["directional"]
    assert data["means"] == {"baseline": 10.0, "apt": 11.0}
    frame = report.to_frame()
    assert list(frame.columns) == ["system", "seed", "bleu"] and len(frame) == 2


def test_experiment_needs_a_seed(tiny_run_config, tmp_path):
    with pytest.raises(ValueError):
        run_experiment(tiny_run_config, seeds=[], out_dir=tmp_path)


@pytest.mark.slow
def test_experiment_end_to_end(tiny_run_config, tmp_path):
    report = run_experiment(tiny_run_config, seeds=[0], out_dir=tmp_path, beam_size=2, verbose=False)
    assert set(report.scores) == {"baseline", "finetune", "apt"}
    assert not report.errors
    assert all(0.0 <= s[0] <= 100.0 for s in report.scores.values())
    assert sorted(p.name for p in (tmp_path / "teachers").iterdir()) == ["src_masked.ckpt", "tgt_causal.ckpt"]
    results = pd.read_csv(tmp_path / "results.csv")
    assert len(results) == 3
    saved = json.loads((tmp_path / "report.json").read_text())
    assert saved["non_inferior"] == report.non_inferior
    assert (tmp_path / "results.png").exists()

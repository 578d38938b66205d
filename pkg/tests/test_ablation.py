import json
import math

import pandas as pd
import pytest

from ablation import SUMMARY_COLUMNS, run_cells, run_suite
from pretrain import TeacherPool
from run_tracker import CellStatus, RunTracker
from strategy import IntegrationPlan, Side, TeacherChoice
from utils.run_logger import get_event_logger


def test_cells_share_one_reference_and_failures_do_not_stop_the_suite(tiny_config, tiny_data, tiny_trainer_config,
                                                                      teachers, tmp_path):
    pool = TeacherPool([teachers.get("tgt", "causal")])
    plans = {
        "baseline": IntegrationPlan.baseline(),
        "apt": IntegrationPlan(),
        "kd": IntegrationPlan(fusion_side=Side.NONE, encoder_teacher=TeacherChoice.NONE),
    }
    tracker = RunTracker()
    summary = run_cells("mini", plans, tiny_data, tiny_config, tiny_trainer_config, pool, tmp_path, seed=0,
                        tracker=tracker, verbose=False)

    assert list(summary.columns) == SUMMARY_COLUMNS
    assert list(summary["cell_name"]) == ["baseline", "apt", "kd"]
    rows = summary.set_index("cell_name")
    assert rows.loc["baseline", "delta_vs_baseline"] == 0.0
    assert math.isnan(rows.loc["apt", "bleu"]) and math.isnan(rows.loc["apt", "delta_vs_baseline"])
    assert rows.loc["kd", "delta_vs_baseline"] == pytest.approx(rows.loc["kd", "bleu"] - rows.loc["baseline", "bleu"])

    on_disk = pd.read_csv(tmp_path / "summary.csv")
    assert list(on_disk.columns) == SUMMARY_COLUMNS and len(on_disk) == 3
    assert (tmp_path / "summary.png").exists()
    assert sorted(p.name for p in (tmp_path / "cells").iterdir()) == ["baseline.jsonl", "kd.jsonl"]

    cells = {c["name"]: c for c in json.loads((tmp_path / "cells.json").read_text())}
    assert cells["apt"]["status"] == "failed" and cells["apt"]["error_code"] == "E_PLAN"
    assert cells["kd"]["status"] == "completed"
    assert cells["kd"]["result"]["active_losses"] == ["l_t", "l_s", "l_w"]
    assert tracker.summary("mini") == {"pending": 0, "running": 0, "completed": 2, "failed": 1}
    assert tracker.get("mini", "baseline").status is CellStatus.COMPLETED

    failures = get_event_logger().get_history(event="cell_failed")
    assert [(e["cell"], e["code"]) for e in failures] == [("apt", "E_PLAN")]


@pytest.mark.slow
def test_run_suite_from_config(tiny_run_config, teachers, tmp_path):
    summary = run_suite(tiny_run_config, "table5", tmp_path / "table5", teachers=teachers, verbose=False)
    assert len(summary) == 7
    assert summary["cell_name"].iloc[0] == "baseline"
    assert summary["delta_vs_baseline"].iloc[0] == 0.0
    assert summary["bleu"].between(0.0, 100.0).all()
    assert (tmp_path / "table5" / "summary.csv").exists()

"""
Ablation suites: train every cell of a named suite with one seed and one set of training settings.

Outputs under the suite directory:
    cells/<cell>.jsonl   metrics log of each cell
    summary.csv          cell_name, bleu, delta_vs_baseline
    cells.json           status, result and error of every cell
    summary.png          bar chart of the deltas
"""

import json
import math
from pathlib import Path
from typing import Dict, Optional, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

from config import RunConfig, load_corpora
from pretrain import TeacherPool
from run_tracker import CellStatus, RunTracker, get_run_tracker
from strategy import IntegrationPlan, ablation_suite
from trainer import ParallelData, TrainerConfig, train
from transformer_core import ModelConfig
from utils.run_logger import get_event_logger

SUMMARY_COLUMNS = ["cell_name", "bleu", "delta_vs_baseline"]


def _safe_name(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)


def plot_summary(summary: pd.DataFrame, output_file: Union[str, Path], title: str = "Ablation deltas"):
    deltas = summary["delta_vs_baseline"].fillna(0.0)
    colors = ["tab:green" if d >= 0 else "tab:red" for d in deltas]
    plt.figure(figsize=(max(6, 0.8 * len(summary)), 4))
    plt.bar(range(len(summary)), deltas, color=colors)
    plt.xticks(range(len(summary)), summary["cell_name"], rotation=45, ha="right", fontsize=8)
    plt.axhline(0.0, color="gray", linestyle=":", alpha=0.6)
    plt.ylabel("BLEU delta vs baseline")
    plt.title(title)
    plt.tight_layout()
    plt.savefig(output_file, dpi=150, bbox_inches="tight")
    plt.close()


def run_cells(suite: str, plans: Dict[str, IntegrationPlan], data: ParallelData, model_config: ModelConfig,
              trainer_config: TrainerConfig, teachers: Optional[TeacherPool], out_dir: Union[str, Path],
              seed: int = 0, teacher_paths: Optional[dict] = None, tracker: Optional[RunTracker] = None,
              verbose: bool = True) -> pd.DataFrame:
    """
    Train each plan in order and write the suite outputs.

    The first cell is the reference for ``delta_vs_baseline``. A cell that
    raises is marked failed (bleu NaN) and the suite continues.
    """
    out_dir = Path(out_dir)
    cell_dir = out_dir / "cells"
    cell_dir.mkdir(parents=True, exist_ok=True)
    tracker = tracker or get_run_tracker()
    events = get_event_logger()
    for name, plan in plans.items():
        tracker.register(suite, name, {"plan": plan.model_dump(mode="json")})

    if verbose:
        print("=" * 60)
        print(f"Ablation suite {suite}: {len(plans)} cells, seed {seed}")
        print("=" * 60)

    scores: Dict[str, float] = {}
    for index, (name, plan) in enumerate(plans.items(), start=1):
        tracker.set_status(suite, name, CellStatus.RUNNING)
        tracker.update_progress(suite, name, 0.0, "training")
        try:
            result = train(plan, data, model_config, trainer_config, teachers=teachers, seed=seed,
                           metrics_path=cell_dir / f"{_safe_name(name)}.jsonl", teacher_paths=teacher_paths,
                           verbose=False)
        except Exception as exc:
            code = getattr(exc, "code", "E_INTERNAL")
            tracker.set_status(suite, name, CellStatus.FAILED, error=str(exc), error_code=code)
            events.log_event("cell_failed", suite=suite, cell=name, code=code, error=str(exc))
            scores[name] = float("nan")
            if verbose:
                print(f"[{index}/{len(plans)}] {name:40s} | FAILED {code}: {exc}")
            continue
        scores[name] = result.best_bleu
        tracker.set_status(suite, name, CellStatus.COMPLETED,
                           result={"bleu": result.best_bleu, "best_epoch": result.best_epoch,
                                   "added_parameters": result.step.added_parameters,
                                   "active_losses": result.step.active_losses})
        if verbose:
            print(f"[{index}/{len(plans)}] {name:40s} | BLEU {result.best_bleu:6.2f}")

    reference = next(iter(scores.values())) if scores else float("nan")
    rows = []
    for name, score in scores.items():
        delta = score - reference if not (math.isnan(score) or math.isnan(reference)) else float("nan")
        rows.append({"cell_name": name, "bleu": score, "delta_vs_baseline": delta})
    summary = pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
    summary.to_csv(out_dir / "summary.csv", index=False)
    with open(out_dir / "cells.json", "w", encoding="utf-8") as f:
        json.dump([cell.to_dict() for cell in tracker.cells(suite)], f, indent=2)
    if not summary.empty:
        plot_summary(summary, out_dir / "summary.png", title=f"{suite}: BLEU delta vs baseline")

    if verbose:
        counts = tracker.summary(suite)
        print(f"\nCompleted {counts['completed']}/{len(plans)} cells ({counts['failed']} failed)")
        print(f"Summary written to: {out_dir / 'summary.csv'}")
    return summary


def run_suite(config: RunConfig, suite: str, out_dir: Union[str, Path], teachers: Optional[TeacherPool] = None,
              verbose: bool = True) -> pd.DataFrame:
    """Run a named suite ("table3", "table5" or "table6") from a RunConfig."""
    plans = ablation_suite(suite)
    corpora, src_tok, tgt_tok = load_corpora(config)
    data = ParallelData.from_corpora(corpora, src_tok, tgt_tok)
    teacher_paths = config.teachers.as_dict()
    if teachers is None:
        teachers = TeacherPool.from_paths(teacher_paths)
    return run_cells(suite, plans, data, config.model, config.trainer, teachers, out_dir, seed=config.seed,
                     teacher_paths=teacher_paths, verbose=verbose)

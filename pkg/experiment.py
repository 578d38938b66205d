"""
Directional synthetic experiment.

Pretrains a masked source teacher and a causal target teacher on the
monolingual corpora, then trains baseline, fine-tuned and APT students
(encoder fusion + decoder distillation) for each seed and compares test BLEU.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from config import RunConfig, load_corpora
from data import SyntheticCorpora, Tokenizer
from errors import AptError
from evaluation import bleu, translate_corpus
from pretrain import TeacherKind, TeacherPool, pretrain_causal, pretrain_masked
from run_tracker import CellStatus, get_run_tracker
from strategy import IntegrationPlan, PlanMode, Side, TrainingStep
from trainer import ParallelData, train
from utils.paths import get_output_dir

NON_INFERIORITY_MARGIN = 0.5


def experiment_plans() -> Dict[str, IntegrationPlan]:
    return {
        "baseline": IntegrationPlan.baseline(),
        "finetune": IntegrationPlan(mode=PlanMode.FINETUNE, fusion_side=Side.NONE, distill_side=Side.NONE),
        "apt": IntegrationPlan(),
    }


def pretrain_teachers(config: RunConfig, corpora: SyntheticCorpora, src_tok: Tokenizer, tgt_tok: Tokenizer,
                      out_dir: Union[str, Path], verbose: bool = True) -> Tuple[TeacherPool, Dict[str, str]]:
    """Masked teacher on mono.src and causal teacher on mono.tgt, saved under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pool = TeacherPool()
    paths: Dict[str, str] = {}
    jobs = [
        ("src", TeacherKind.MASKED, pretrain_masked, corpora.mono_src, src_tok),
        ("tgt", TeacherKind.CAUSAL, pretrain_causal, corpora.mono_tgt, tgt_tok),
    ]
    for language, kind, run, sentences, tok in jobs:
        ids = [tok.encode(s) for s in sentences]
        result = run(ids, config.teacher_config(language), seed=config.seed, vocab=tok.vocab, verbose=verbose)
        path = out_dir / f"{language}_{kind.value}.ckpt"
        result.checkpoint.save(path)
        pool.add(result.model)
        paths[f"{language}_{kind.value}"] = str(path)
    return pool, paths


def heldout_bleu(step: TrainingStep, sources: Sequence[List[int]], references: Sequence[str], tgt_tok: Tokenizer,
                 beam_size: int = 4, max_len: Optional[int] = None) -> float:
    hypotheses = translate_corpus(step.translator(), sources, beam_size=beam_size, max_len=max_len)
    return bleu([tgt_tok.decode(h.output_ids) for h in hypotheses], list(references))


@dataclass
class ExperimentReport:
    seeds: List[int]
    scores: Dict[str, Dict[int, float]] = field(default_factory=dict)
    margin: float = NON_INFERIORITY_MARGIN
    errors: Dict[str, str] = field(default_factory=dict)

    def mean(self, system: str) -> float:
        values = [v for v in self.scores.get(system, {}).values() if np.isfinite(v)]
        return float(np.mean(values)) if values else float("nan")

    @property
    def non_inferior(self) -> bool:
        """APT within ``margin`` of the baseline on the first seed."""
        first = self.seeds[0]
        apt = self.scores.get("apt", {}).get(first, float("nan"))
        base = self.scores.get("baseline", {}).get(first, float("nan"))
        return bool(np.isfinite(apt) and np.isfinite(base) and apt >= base - self.margin)

    @property
    def directional(self) -> bool:
        """Seed-averaged APT BLEU above the seed-averaged baseline."""
        return bool(self.mean("apt") > self.mean("baseline"))

    def to_frame(self) -> pd.DataFrame:
        rows = [{"system": system, "seed": seed, "bleu": score}
                for system, per_seed in self.scores.items() for seed, score in per_seed.items()]
        return pd.DataFrame(rows, columns=["system", "seed", "bleu"])

    def to_dict(self) -> dict:
        data = asdict(self)
        data["scores"] = {s: {str(k): v for k, v in per.items()} for s, per in self.scores.items()}
        data.update(non_inferior=self.non_inferior, directional=self.directional,
                    means={s: self.mean(s) for s in self.scores})
        return data


def plot_experiment(report: ExperimentReport, output_file: Union[str, Path]):
    frame = report.to_frame()
    if frame.empty:
        return
    table = frame.pivot(index="seed", columns="system", values="bleu")
    table.plot(kind="bar", figsize=(8, 4))
    plt.ylabel("Test BLEU")
    plt.title("Baseline vs fine-tuning vs APT")
    plt.grid(True, axis="y", alpha=0.3)
    plt.tight_layout()
    plt.savefig(output_file, dpi=150, bbox_inches="tight")
    plt.close()


def run_experiment(config: RunConfig, seeds: Sequence[int] = (0, 1, 2), out_dir: Optional[Union[str, Path]] = None,
                   teachers: Optional[TeacherPool] = None, beam_size: int = 4,
                   verbose: bool = True) -> ExperimentReport:
    """
    Train every experiment system for every seed and write results.csv,
    report.json and results.png under ``out_dir``.

    Teachers come from ``teachers``, then from the config's checkpoint paths,
    and are pretrained from the monolingual corpora when still missing.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("run_experiment needs at least one seed")
    out_dir = Path(out_dir) if out_dir is not None else get_output_dir() / "experiment"
    out_dir.mkdir(parents=True, exist_ok=True)
    corpora, src_tok, tgt_tok = load_corpora(config)
    data = ParallelData.from_corpora(corpora, src_tok, tgt_tok)
    test_sources = [src_tok.encode(s) for s in corpora.test_src] or data.valid_sources
    test_refs = list(corpora.test_tgt) or data.valid_references

    paths = {k: v for k, v in config.teachers.as_dict().items() if v}
    if teachers is None:
        teachers = TeacherPool.from_paths(paths)
    if ("src", "masked") not in teachers or ("tgt", "causal") not in teachers:
        pretrained, new_paths = pretrain_teachers(config, corpora, src_tok, tgt_tok, out_dir / "teachers", verbose)
        for model in pretrained:
            if (model.language, model.kind.value) not in teachers:
                teachers.add(model)
        paths.update(new_paths)

    tracker = get_run_tracker()
    report = ExperimentReport(seeds=seeds)
    plans = experiment_plans()
    for seed in seeds:
        for system, plan in plans.items():
            name = f"{system}_seed{seed}"
            tracker.register("experiment", name)
            tracker.set_status("experiment", name, CellStatus.RUNNING)
            try:
                result = train(plan, data, config.model, config.trainer, teachers=teachers, seed=seed,
                               metrics_path=out_dir / f"{name}.jsonl", teacher_paths=paths, verbose=verbose)
                if result.checkpoint is not None:
                    result.model.params.load_state_dict(result.checkpoint.tensors)
                score = heldout_bleu(result.step, test_sources, test_refs, tgt_tok, beam_size,
                                     config.trainer.decode_max_len)
            except AptError as exc:
                tracker.set_status("experiment", name, CellStatus.FAILED, error=str(exc), error_code=exc.code)
                report.errors[name] = f"{exc.code}: {exc}"
                score = float("nan")
            else:
                tracker.set_status("experiment", name, CellStatus.COMPLETED, result={"bleu": score})
            report.scores.setdefault(system, {})[seed] = score
            if verbose:
                print(f"  seed {seed} {system:10s} test BLEU {score:6.2f}")

    report.to_frame().to_csv(out_dir / "results.csv", index=False)
    with open(out_dir / "report.json", "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2)
    plot_experiment(report, out_dir / "results.png")

    if verbose:
        print("\n" + "=" * 60)
        print("DIRECTIONAL EXPERIMENT")
        print("=" * 60)
        for system in plans:
            print(f"  {system:10s} mean test BLEU: {report.mean(system):6.2f}")
        print(f"  non-inferiority (APT >= baseline - {report.margin}): {'PASS' if report.non_inferior else 'FAIL'}")
        print(f"  directional (mean APT > mean baseline)       : {'PASS' if report.directional else 'FAIL'}")
    return report

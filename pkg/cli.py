"""
Command-line entry point.

    python cli.py datagen    --spec task.json --out data/corpus
    python cli.py pretrain   --config run.json --objective masked --out src_masked.ckpt
    python cli.py train      --config run.json --mode apt --out student.ckpt --metrics metrics.jsonl
    python cli.py translate  --ckpt student.ckpt --input test.src --beam 4 --out hyp.txt
    python cli.py evaluate   --hyp hyp.txt --ref test.tgt
    python cli.py gradcheck  --config run.json
    python cli.py ablate     --config run.json --suite table5 --out runs/table5
    python cli.py experiment --config run.json --seeds 0 1 2
    python cli.py cache      --stats

Errors are reported as one stderr line ``<CODE>: <message>``; the exit
status is 2 for configuration errors and 1 for anything else.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from config import RunConfig, load_corpora, load_run_config
from data import SyntheticTaskSpec, generate_synthetic, load_task_spec, read_corpus, write_corpus
from errors import AptError, ConfigError, PlanError, SpecError
from evaluation import bleu_details, translate_corpus
from pretrain import TeacherKind, TeacherPool, pretrain_causal, pretrain_masked
from strategy import IntegrationPlan, PlanMode, Side, validate_plan
from teacher_cache import get_cache
from trainer import ParallelData, gradcheck, load_student, train
from transformer_core import ModelConfig
from utils.paths import ensure_directories, get_checkpoint_dir, get_data_dir, get_output_dir

CONFIG_ERRORS = (ConfigError, PlanError, SpecError)

GRADCHECK_MODEL = ModelConfig(d_model=8, n_heads=2, enc_depth=2, dec_depth=2, d_ff=16, src_vocab=11, tgt_vocab=11,
                              dropout=0.0, label_smoothing=0.1, max_len=8)


def _config(args) -> RunConfig:
    return load_run_config(args.config) if args.config else RunConfig()


def plan_for_mode(plan: IntegrationPlan, mode: Optional[str]) -> IntegrationPlan:
    """Override the configured plan's mode from the command line."""
    if mode is None:
        return plan
    if mode == PlanMode.BASELINE.value:
        return IntegrationPlan.baseline()
    fields = plan.model_dump()
    fields["mode"] = PlanMode(mode)
    if mode == PlanMode.FINETUNE.value:
        fields.update(fusion_side=Side.NONE, distill_side=Side.NONE)
    elif fields["fusion_side"] is Side.NONE and fields["distill_side"] is Side.NONE:
        defaults = IntegrationPlan()
        fields.update(fusion_side=defaults.fusion_side, distill_side=defaults.distill_side)
    return IntegrationPlan(**fields)


def cmd_datagen(args) -> int:
    spec = load_task_spec(args.spec) if args.spec else SyntheticTaskSpec()
    out_dir = Path(args.out) if args.out else get_data_dir()
    corpora = generate_synthetic(spec)
    written = corpora.write(out_dir)
    with open(out_dir / "task.json", "w", encoding="utf-8") as f:
        f.write(spec.model_dump_json(indent=2))
    print("=" * 60)
    print("SYNTHETIC CORPORA")
    print("=" * 60)
    for name, path in written.items():
        print(f"  {name:10s} -> {path}")
    return 0


def cmd_pretrain(args) -> int:
    config = _config(args)
    kind = TeacherKind(args.objective)
    language = args.language or ("src" if kind is TeacherKind.MASKED else "tgt")
    corpora, src_tok, tgt_tok = load_corpora(config)
    tok = src_tok if language == "src" else tgt_tok
    sentences = read_corpus(args.corpus) if args.corpus else getattr(corpora, f"mono_{language}")
    ids = [tok.encode(s) for s in sentences]
    run = pretrain_masked if kind is TeacherKind.MASKED else pretrain_causal
    result = run(ids, config.teacher_config(language), seed=config.seed, vocab=tok.vocab)
    out = Path(args.out) if args.out else get_checkpoint_dir() / f"{language}_{kind.value}.ckpt"
    result.checkpoint.save(out)
    print(f"Teacher checkpoint saved to: {out} (checksum {result.model.checksum()[:12]})")
    return 0


def cmd_train(args) -> int:
    config = _config(args)
    plan = plan_for_mode(config.plan, args.mode)
    teacher_paths = config.teachers.as_dict()
    teachers = TeacherPool.from_paths(teacher_paths)
    report = validate_plan(plan, config.model, teachers)
    for warning in report.warnings:
        print(f"Warning: {warning}")
    if not report.valid:
        raise PlanError("invalid integration plan: " + "; ".join(report.violations), report.violations)
    corpora, src_tok, tgt_tok = load_corpora(config)
    data = ParallelData.from_corpora(corpora, src_tok, tgt_tok)
    out = Path(args.out) if args.out else get_checkpoint_dir() / f"student_{plan.mode.value}.ckpt"
    result = train(plan, data, config.model, config.trainer, teachers=teachers, seed=config.seed,
                   metrics_path=args.metrics, checkpoint_path=out, teacher_paths=teacher_paths)
    print(f"Best validation BLEU {result.best_bleu:.2f} at epoch {result.best_epoch}; checkpoint: {out}")
    return 0


def cmd_translate(args) -> int:
    step, src_tok, tgt_tok = load_student(args.ckpt)
    sources = [src_tok.encode(s) for s in read_corpus(args.input)]
    hypotheses = translate_corpus(step.translator(), sources, beam_size=args.beam, max_len=args.max_len)
    outputs = [tgt_tok.decode(h.output_ids) for h in hypotheses]
    if args.out:
        write_corpus(args.out, outputs)
        print(f"{len(outputs)} translations written to: {args.out}")
    else:
        for line in outputs:
            print(line)
    return 0


def cmd_evaluate(args) -> int:
    details = bleu_details(read_corpus(args.hyp), read_corpus(args.ref))
    print(f"BLEU = {details.bleu:.2f}")
    print(json.dumps(details.to_dict(), sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    config = _config(args)
    plans = {"baseline": IntegrationPlan.baseline(), "config": plan_for_mode(config.plan, args.mode)}
    results = {}
    for name, plan in plans.items():
        report = gradcheck(plan, GRADCHECK_MODEL, seed=config.seed, coordinates=args.coordinates,
                           tolerance=args.tolerance)
        results[name] = report.to_dict()
        status = "PASS" if report.passed else "FAIL"
        print(f"{name:10s} {status}: max rel. error {report.max_rel_error:.3e} over {report.checked} coordinates")
    print(json.dumps(results, sort_keys=True))
    return 0 if all(r["passed"] for r in results.values()) else 1


def cmd_ablate(args) -> int:
    from ablation import run_suite

    config = _config(args)
    out = Path(args.out) if args.out else get_output_dir() / args.suite
    run_suite(config, args.suite, out)
    return 0


def cmd_experiment(args) -> int:
    from experiment import run_experiment

    config = _config(args)
    report = run_experiment(config, seeds=args.seeds, out_dir=args.out, beam_size=args.beam)
    return 0 if report.non_inferior else 1


def cmd_cache(args) -> int:
    cache = get_cache(persist=True)
    if args.clear:
        cache.clear()
        print("Teacher cache cleared.")
    stats = cache.get_stats()
    print("=" * 60)
    print("TEACHER OUTPUT CACHE")
    print("=" * 60)
    print(f"Disk entries   : {stats['disk_entries']}")
    print(f"Total size     : {stats['total_size_mb']:.2f} MB")
    print(f"Cache directory: {stats['cache_dir']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="APT neural machine translation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="Generate synthetic parallel and monolingual corpora")
    p.add_argument("--spec", help="SyntheticTaskSpec JSON file (defaults used when omitted)")
    p.add_argument("--out", help="Output corpus directory")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("pretrain", help="Pretrain a frozen teacher")
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--corpus", help="Monolingual corpus file (defaults to mono.<language>)")
    p.add_argument("--objective", choices=[k.value for k in TeacherKind], required=True)
    p.add_argument("--language", choices=["src", "tgt"])
    p.add_argument("--out", help="Teacher checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="Train a student")
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--mode", choices=[m.value for m in PlanMode])
    p.add_argument("--out", help="Student checkpoint path")
    p.add_argument("--metrics", help="Metrics JSONL path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="Translate a file with a student checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="Corpus BLEU of a hypothesis file")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="Finite-difference gradient check")
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--mode", choices=[m.value for m in PlanMode])
    p.add_argument("--coordinates", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="Run an ablation suite")
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--suite", choices=["table3", "table5", "table6"], required=True)
    p.add_argument("--out", help="Suite output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("experiment", help="Baseline / fine-tune / APT directional experiment")
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--out", help="Experiment output directory")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("cache", help="Teacher-output cache statistics")
    p.add_argument("--stats", action="store_true", help="Show cache statistics")
    p.add_argument("--clear", action="store_true", help="Clear the cache")
    p.set_defaults(func=cmd_cache)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ensure_directories()
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 2
    except AptError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"E_IO: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

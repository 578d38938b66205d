"""
Student training loop, student checkpoints and the gradient-check harness.

``train`` runs epochs of Adam updates on the plan's joint loss, logs one
metrics record per step and per epoch, keeps the checkpoint with the best
validation BLEU and refuses to finish if any teacher changed.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

import tensor_core as tc
from checkpoint import Checkpoint
from data import (BpeModel, SyntheticCorpora, Tokenizer, Vocabulary, encode_pairs, make_batch, make_batches)
from errors import CheckpointError, FrozenTeacherError, NumericError, PlanError, TrainingAborted
from evaluation import bleu, translate_corpus
from optim import OptimizerState, adam_step, clip_by_global_norm, lr_at
from pretrain import PretrainedModel, TeacherConfig, TeacherKind, TeacherPool, load_teacher
from strategy import IntegrationPlan, PlanMode, TeacherChoice, TrainingStep, apply_finetune, build_training_step
from teacher_cache import get_cache
from transformer_core import ModelConfig, TransformerModel, translation_loss
from utils.run_logger import MetricsLogger, get_event_logger

__all__ = [
    "TrainerConfig", "ParallelData", "TrainResult", "train", "gradcheck", "GradcheckReport",
    "student_checkpoint", "load_student", "lr_at", "adam_step", "OptimizerState",
]


class TrainerConfig(BaseModel):
    """Optimisation budget and validation settings."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(10, ge=1)
    batch_size: int = Field(32, ge=1)
    max_len: int = Field(64, ge=2)
    warmup_steps: int = Field(400, ge=1)
    lr_scale: float = Field(1.0, gt=0.0)
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float = 5.0
    valid_beam: int = Field(1, ge=1)
    valid_max_sentences: int = Field(200, ge=0)
    decode_max_len: Optional[int] = None
    teacher_mode: str = "exact"
    teacher_exact_cap: int = 64
    use_teacher_cache: bool = True


@dataclass
class ParallelData:
    """Tokenised training/validation data plus the tokenizers that produced it."""

    src_tokenizer: Tokenizer
    tgt_tokenizer: Tokenizer
    train_pairs: List[Tuple[List[int], List[int]]]
    valid_sources: List[List[int]] = field(default_factory=list)
    valid_references: List[str] = field(default_factory=list)
    valid_pairs: List[Tuple[List[int], List[int]]] = field(default_factory=list)

    @classmethod
    def from_corpora(cls, corpora: SyntheticCorpora, src_tokenizer: Tokenizer, tgt_tokenizer: Tokenizer) -> "ParallelData":
        valid_pairs = encode_pairs(corpora.valid_src, corpora.valid_tgt, src_tokenizer, tgt_tokenizer)
        return cls(
            src_tokenizer=src_tokenizer,
            tgt_tokenizer=tgt_tokenizer,
            train_pairs=encode_pairs(corpora.train_src, corpora.train_tgt, src_tokenizer, tgt_tokenizer),
            valid_sources=[p[0] for p in valid_pairs],
            valid_references=list(corpora.valid_tgt),
            valid_pairs=valid_pairs,
        )


@dataclass
class TrainResult:
    model: TransformerModel
    step: TrainingStep
    checkpoint: Optional[Checkpoint]
    metrics: List[dict]
    best_bleu: float = 0.0
    best_epoch: int = 0
    optimizer_steps: int = 0
    skipped_steps: int = 0


# ---------------------------------------------------------------------------
# student checkpoints
# ---------------------------------------------------------------------------

def student_checkpoint(step: TrainingStep, src_tokenizer: Tokenizer, tgt_tokenizer: Tokenizer,
                       teacher_paths: Optional[Dict[str, Optional[str]]] = None,
                       metadata: Optional[dict] = None) -> Checkpoint:
    meta = {
        "plan": step.plan.model_dump(mode="json"),
        "src_vocab": src_tokenizer.vocab.to_list(),
        "tgt_vocab": tgt_tokenizer.vocab.to_list(),
        "src_bpe": [list(m) for m in src_tokenizer.bpe.merges] if src_tokenizer.bpe else None,
        "tgt_bpe": [list(m) for m in tgt_tokenizer.bpe.merges] if tgt_tokenizer.bpe else None,
        "teachers": dict(teacher_paths or {}),
    }
    meta.update(metadata or {})
    return Checkpoint(kind="nmt", config=step.model.config.model_dump(), tensors=step.model.params.state_dict(),
                      metadata=meta)


def _tokenizer(vocab: List[str], merges) -> Tokenizer:
    bpe = BpeModel([tuple(m) for m in merges]) if merges else None
    return Tokenizer(Vocabulary.from_list(vocab), bpe)


def load_student(ckpt: Union[Checkpoint, str, Path], teachers: Optional[TeacherPool] = None
                 ) -> Tuple[TrainingStep, Tokenizer, Tokenizer]:
    """Rebuild model, fusion banks and tokenizers from an NMT checkpoint."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    if ckpt.kind != "nmt":
        raise CheckpointError(f"expected an nmt checkpoint, got kind {ckpt.kind!r}")
    meta = ckpt.metadata
    plan = IntegrationPlan.model_validate(meta["plan"])
    if teachers is None:
        teachers = TeacherPool.from_paths(meta.get("teachers", {}))
    dtype = next(iter(ckpt.tensors.values())).dtype.name
    with tc.precision(dtype):
        model = TransformerModel(ModelConfig.model_validate(ckpt.config))
        step = TrainingStep(plan, model, teachers)
    model.params.load_state_dict(ckpt.tensors)
    return step, _tokenizer(meta["src_vocab"], meta.get("src_bpe")), _tokenizer(meta["tgt_vocab"], meta.get("tgt_bpe"))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _plan_teacher(plan: IntegrationPlan, teachers: TeacherPool, side: str) -> Optional[PretrainedModel]:
    choice = plan.encoder_teacher if side == "encoder" else plan.decoder_teacher
    if choice is TeacherChoice.NONE:
        return None
    return teachers.get("src" if side == "encoder" else "tgt", choice.value)


def validation_loss(step: TrainingStep, pairs: Sequence[Tuple[List[int], List[int]]], batch_size: int,
                    max_len: int) -> float:
    """Token-mean unsmoothed NLL over the validation pairs."""
    total = 0.0
    tokens = 0
    with tc.no_grad():
        for batch in make_batches(pairs, batch_size, max_len):
            enc = step.encode(batch.src, training=False)
            logits, _ = step.decode(batch.tgt_in, enc, training=False)
            loss = translation_loss(logits, batch.tgt_out, 0.0)
            total += loss.item() * batch.n_target_tokens
            tokens += batch.n_target_tokens
    return total / tokens if tokens else float("nan")


def validation_bleu(step: TrainingStep, data: ParallelData, config: TrainerConfig) -> float:
    limit = config.valid_max_sentences
    sources = data.valid_sources[:limit]
    references = data.valid_references[:limit]
    if not sources:
        return 0.0
    hypotheses = translate_corpus(step.translator(), sources, beam_size=config.valid_beam,
                                  max_len=config.decode_max_len, threads=1)
    outputs = [data.tgt_tokenizer.decode(h.output_ids) for h in hypotheses]
    return bleu(outputs, references)


def train(plan: IntegrationPlan, data: ParallelData, model_config: ModelConfig, config: TrainerConfig,
          teachers: Optional[TeacherPool] = None, seed: int = 0, metrics_path=None, checkpoint_path=None,
          teacher_paths: Optional[Dict[str, Optional[str]]] = None, verbose: bool = True) -> TrainResult:
    """
    Train a student under ``plan``.

    Parameters:
    -----------
    plan : IntegrationPlan
        Validated before any work
    data : ParallelData
        Tokenised parallel data; validation sources/references drive BLEU
    model_config, config : ModelConfig, TrainerConfig
        Student architecture and optimisation budget
    teachers : TeacherPool, optional
        Frozen teachers required by the plan
    seed : int
        Seeds initialisation, batch order and dropout
    metrics_path : path, optional
        Metrics JSONL destination (one record per step and per epoch)
    checkpoint_path : path, optional
        Where the best-by-validation-BLEU checkpoint is written

    Returns:
    --------
    TrainResult
    """
    teachers = teachers if teachers is not None else TeacherPool()
    events = get_event_logger()
    model = TransformerModel(model_config, seed=seed)
    if plan.mode is PlanMode.FINETUNE:
        encoder_teacher = _plan_teacher(plan, teachers, "encoder")
        decoder_teacher = _plan_teacher(plan, teachers, "decoder")
        if encoder_teacher is None and decoder_teacher is None:
            raise PlanError("finetune plan needs a loaded teacher", ["finetune teacher missing"])
        apply_finetune(model, encoder_teacher, decoder_teacher)
    cache = get_cache() if config.use_teacher_cache else None
    step = build_training_step(plan, model, teachers, seed=seed, teacher_mode=config.teacher_mode,
                               exact_cap=config.teacher_exact_cap, cache=cache)
    fingerprints = teachers.checksums()

    state = OptimizerState(d_model=model_config.d_model, warmup_steps=config.warmup_steps, scale=config.lr_scale,
                           beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    logger = MetricsLogger(metrics_path)
    rng = np.random.default_rng(seed)
    model.reseed(seed)
    best: Optional[Checkpoint] = None
    best_bleu = -1.0
    best_epoch = 0
    saved_path: Optional[str] = None
    global_step = 0

    if verbose:
        print("=" * 60)
        print(f"Training {plan.mode.value} student: {len(data.train_pairs)} pairs, "
              f"{step.parameter_count:,} parameters ({step.added_parameters:,} fusion), "
              f"losses {'+'.join(step.active_losses)}")
        print("=" * 60)

    for epoch in range(1, config.epochs + 1):
        batches = make_batches(data.train_pairs, config.batch_size, min(config.max_len, model_config.max_len), rng)
        for batch in batches:
            global_step += 1
            model.params.zero_grad()
            try:
                bundle = step(batch, training=True)
                tc.backward(bundle.total)
            except NumericError as exc:
                events.log_event("training_aborted", step=global_step, error=str(exc), last_checkpoint=saved_path)
                raise TrainingAborted(f"non-finite loss at step {global_step}: {exc}", last_checkpoint=saved_path) from exc
            grads, _ = clip_by_global_norm(model.params.gradients(), config.clip_norm)
            adam_step(model.params, grads, state, logger=events)
            values = bundle.values()
            logger.log_step(global_step, values["l_t"], values["l_s"], values["l_w"], values["total"],
                            state.lr(max(state.step, 1)))

        valid_loss = validation_loss(step, data.valid_pairs, config.batch_size, model_config.max_len)
        valid_bleu = validation_bleu(step, data, config)
        logger.log_epoch(epoch, valid_bleu, valid_loss)
        if verbose:
            print(f"  epoch {epoch}: valid BLEU {valid_bleu:.2f}, valid loss {valid_loss:.4f}")
        if valid_bleu > best_bleu:
            best_bleu, best_epoch = valid_bleu, epoch
            best = student_checkpoint(step, data.src_tokenizer, data.tgt_tokenizer, teacher_paths,
                                      {"seed": seed, "epoch": epoch, "valid_bleu": valid_bleu})
            if checkpoint_path is not None:
                saved_path = str(best.save(checkpoint_path))

    model.params.zero_grad()
    teachers.verify_frozen()
    if teachers.checksums() != fingerprints:
        raise FrozenTeacherError("teacher parameters changed during student training")
    if cache is not None and verbose:
        stats = cache.get_stats()
        print(f"  teacher cache: {stats['hits']} hits, {stats['misses']} misses")
    return TrainResult(model=model, step=step, checkpoint=best, metrics=logger.records, best_bleu=best_bleu,
                       best_epoch=best_epoch, optimizer_steps=state.step, skipped_steps=state.skipped)


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: float
    checked: int
    tolerance: float
    group_max: Dict[str, float] = field(default_factory=dict)
    failures: List[dict] = field(default_factory=list)
    parameter_names: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and self.checked > 0

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_rel_error": self.max_rel_error,
            "checked": self.checked,
            "tolerance": self.tolerance,
            "group_max": self.group_max,
            "failures": self.failures,
        }


def parameter_group(name: str) -> str:
    """Coarse group of a parameter name, e.g. "enc.attn", "fusion.encoder.adapter"."""
    parts = [p for p in name.split(".") if not p.isdigit()]
    if parts[0] == "fusion":
        return ".".join(parts[:3])
    return ".".join(parts[:2]) if len(parts) > 2 else parts[0]


def tiny_teachers(plan: IntegrationPlan, model_config: ModelConfig, seed: int = 0, depth: int = 2) -> TeacherPool:
    """Randomly initialised frozen teachers matching the plan's needs."""
    pool = TeacherPool()
    for side, choice, vocab in (("src", plan.encoder_teacher, model_config.src_vocab),
                                ("tgt", plan.decoder_teacher, model_config.tgt_vocab)):
        if choice is TeacherChoice.NONE or plan.mode is PlanMode.BASELINE:
            continue
        config = TeacherConfig(d_model=model_config.d_model, n_heads=model_config.n_heads, depth=depth,
                               d_ff=model_config.d_ff, vocab=vocab, max_len=model_config.max_len + 2,
                               dropout=0.0, language=side)
        pool.add(PretrainedModel(TeacherKind(choice.value), config, seed=seed + (0 if side == "src" else 1)))
    return pool


def gradcheck(plan: IntegrationPlan, tiny_config: ModelConfig, seed: int = 0, coordinates: int = 200,
              h: float = 1e-5, tolerance: float = 1e-4, batch_size: int = 2) -> GradcheckReport:
    """
    Compare analytic gradients of the plan's total loss with central differences.

    Runs in 64-bit with dropout disabled and non-zero adapter output layers.
    Coordinates are sampled across every trainable student tensor; teacher
    parameters are frozen and never appear in the report.
    """
    rng = np.random.default_rng(seed)
    with tc.precision("float64"):
        config = tiny_config.model_copy(update={"dropout": 0.0})
        model = TransformerModel(config, seed=seed)
        teachers = tiny_teachers(plan, config, seed=seed)
        if plan.mode is PlanMode.FINETUNE:
            apply_finetune(model, _plan_teacher(plan, teachers, "encoder"), _plan_teacher(plan, teachers, "decoder"))
        step = build_training_step(plan, model, teachers, seed=seed, zero_init=False, teacher_mode="exact")
        low = 5
        lengths = [int(rng.integers(2, 5)) for _ in range(2 * batch_size)]
        pairs = [
            ([int(t) for t in rng.integers(low, config.src_vocab, size=n)],
             [int(t) for t in rng.integers(low, config.tgt_vocab, size=max(1, n - 1 + i % 2))])
            for i, n in enumerate(lengths[:batch_size])
        ]
        batch = make_batch(pairs, list(range(len(pairs))))

        model.params.zero_grad()
        tc.backward(step(batch, training=False).total)
        analytic = model.params.gradients()

        names = [n for n, t in model.params.items() if t.requires_grad]
        per_tensor = max(1, math.ceil(coordinates / len(names)))
        report = GradcheckReport(max_rel_error=0.0, checked=0, tolerance=tolerance, parameter_names=names)
        for name in names:
            tensor = model.params[name]
            flat_count = tensor.size
            picks = rng.choice(flat_count, size=min(per_tensor, flat_count), replace=False)
            group = parameter_group(name)
            for flat in picks:
                index = np.unravel_index(int(flat), tensor.shape)
                original = tensor.data.copy()
                with tc.no_grad():
                    bumped = original.copy()
                    bumped[index] += h
                    model.params.assign(name, bumped)
                    plus = step(batch, training=False).total.item()
                    bumped[index] = original[index] - h
                    model.params.assign(name, bumped)
                    minus = step(batch, training=False).total.item()
                model.params.assign(name, original)
                numeric = (plus - minus) / (2 * h)
                exact = float(analytic[name][index])
                rel = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-6)
                report.checked += 1
                report.max_rel_error = max(report.max_rel_error, rel)
                report.group_max[group] = max(report.group_max.get(group, 0.0), rel)
                if rel > tolerance:
                    report.failures.append({"name": name, "index": [int(i) for i in index],
                                            "analytic": exact, "numeric": numeric, "rel_error": rel})
        model.params.zero_grad()
    return report

"""
Integration planning: which knowledge-transfer mechanism attaches where.

An ``IntegrationPlan`` is pure data (JSON round-trippable). ``validate_plan``
checks it against a model configuration and the loaded teachers and returns
a ``PlanReport``; ``build_training_step`` turns a valid plan into a callable
that maps a batch to a ``LossBundle``; ``apply_finetune`` initialises student
parameters from teacher checkpoints.
"""

import threading
from enum import Enum
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import special

import tensor_core as tc
from data import EOS_ID, Batch
from distill import (LossBundle, decoder_sent_distill, encoder_sent_distill, joint_loss,
                     word_distill_loss)
from errors import ConfigError, FinetuneError, PlanError
from fusion import FusionBank, FusionTrace, decoder_fusion_hook, fused_encode
from pretrain import PretrainedModel, TeacherKind, TeacherPool, teacher_distribution
from tensor_core import Tensor
from transformer_core import EncoderState, ModelConfig, TransformerModel, translation_loss

LayerSelector = Union[Literal["embedding", "middle", "output", "all"], Tuple[int, ...]]

DECODER_FUSION_CAVEAT = ("decoder fusion: the target teacher only sees the generated prefix at inference, "
                         "so its representation is incomplete and noisy (known to underperform)")


class PlanMode(str, Enum):
    BASELINE = "baseline"
    FINETUNE = "finetune"
    APT = "apt"


class Side(str, Enum):
    NONE = "none"
    ENCODER = "encoder"
    DECODER = "decoder"
    BOTH = "both"

    @property
    def encoder(self) -> bool:
        return self in (Side.ENCODER, Side.BOTH)

    @property
    def decoder(self) -> bool:
        return self in (Side.DECODER, Side.BOTH)


class TeacherChoice(str, Enum):
    CAUSAL = "causal"
    MASKED = "masked"
    NONE = "none"


class Ablation(str, Enum):
    NO_GATING = "no_gating"
    NO_LAYER_ATTENTION = "no_layer_attention"
    NO_WORD_DISTILL = "no_word_distill"
    NO_SENT_DISTILL = "no_sent_distill"


class IntegrationPlan(BaseModel):
    """
    Declarative description of an integration strategy.

    The default is the recommended configuration: dynamic fusion of a masked
    source teacher into every encoder layer, and distillation from a causal
    target teacher into the decoder output.
    """

    model_config = ConfigDict(extra="forbid", frozen=True, use_enum_values=False)

    mode: PlanMode = PlanMode.APT
    fusion_side: Side = Side.ENCODER
    distill_side: Side = Side.DECODER
    fusion_layers: LayerSelector = "all"
    distill_layers: LayerSelector = "output"
    encoder_teacher: TeacherChoice = TeacherChoice.MASKED
    decoder_teacher: TeacherChoice = TeacherChoice.CAUSAL
    ablations: Tuple[Ablation, ...] = ()
    eta: float = Field(0.5, ge=0.0)
    beta: float = Field(0.5, ge=0.0)

    @field_validator("ablations", mode="after")
    @classmethod
    def _sorted_unique(cls, value):
        return tuple(sorted(set(value), key=lambda a: a.value))

    @field_validator("fusion_layers", "distill_layers", mode="after")
    @classmethod
    def _layer_list(cls, value):
        if isinstance(value, tuple):
            return tuple(sorted(set(int(v) for v in value)))
        return value

    @classmethod
    def baseline(cls) -> "IntegrationPlan":
        return cls(mode=PlanMode.BASELINE, fusion_side=Side.NONE, distill_side=Side.NONE,
                   encoder_teacher=TeacherChoice.NONE, decoder_teacher=TeacherChoice.NONE)

    def has(self, ablation: Ablation) -> bool:
        return ablation in self.ablations

    def to_json(self) -> str:
        return self.model_dump_json()

    @classmethod
    def from_json(cls, text: str) -> "IntegrationPlan":
        return cls.model_validate_json(text)


class PlanReport(BaseModel):
    """Outcome of plan validation; serialisable."""

    model_config = ConfigDict(extra="forbid")

    valid: bool
    violations: List[str] = []
    warnings: List[str] = []
    attachments: Dict[str, List[int]] = {}
    added_parameters: Optional[int] = None
    active_losses: List[str] = []
    experimental: bool = False


def resolve_layers(selector: LayerSelector, depth: int) -> List[int]:
    """Student layer indices (0 = embedding, depth = output) named by a selector."""
    if selector == "embedding":
        return [0]
    if selector == "output":
        return [depth]
    if selector == "middle":
        return list(range(1, depth))
    if selector == "all":
        return list(range(0, depth + 1))
    layers = sorted(set(int(n) for n in selector))
    bad = [n for n in layers if not 0 <= n <= depth]
    if bad:
        raise PlanError(f"layers {bad} are outside 0..{depth}", [f"layer {n} out of range" for n in bad])
    return layers


def _teacher_language(side: str) -> str:
    return "src" if side == "encoder" else "tgt"


def _active_losses(plan: IntegrationPlan) -> List[str]:
    losses = ["l_t"]
    if plan.mode is PlanMode.BASELINE:
        return losses
    sides = plan.distill_side
    if not plan.has(Ablation.NO_SENT_DISTILL) and (sides.encoder or sides.decoder):
        losses.append("l_s")
    if sides.decoder and not plan.has(Ablation.NO_WORD_DISTILL):
        losses.append("l_w")
    return losses


def _fusion_parameters(teacher: PretrainedModel, d_model: int) -> int:
    adapter = teacher.d_model * d_model + d_model + d_model * d_model + d_model
    return teacher.depth * adapter + 2 * (d_model + 1)


def validate_plan(plan: IntegrationPlan, model_config: ModelConfig,
                  teachers: Optional[TeacherPool] = None) -> PlanReport:
    """
    Check a plan against a model configuration and the available teachers.

    Problems are returned as report entries, never raised.
    """
    violations: List[str] = []
    warnings: List[str] = []
    attachments: Dict[str, List[int]] = {}
    experimental = False
    uses_sides = plan.fusion_side is not Side.NONE or plan.distill_side is not Side.NONE

    if plan.mode is PlanMode.APT and not uses_sides:
        violations.append("empty APT plan")
    if plan.mode is PlanMode.BASELINE:
        if uses_sides:
            violations.append("baseline plan must not attach fusion or distillation")
        if plan.encoder_teacher is not TeacherChoice.NONE or plan.decoder_teacher is not TeacherChoice.NONE:
            warnings.append("baseline plan ignores the configured teachers")
    if plan.mode is PlanMode.FINETUNE:
        if plan.encoder_teacher is TeacherChoice.NONE and plan.decoder_teacher is TeacherChoice.NONE:
            violations.append("finetune plan needs at least one teacher")
        if plan.encoder_teacher is TeacherChoice.CAUSAL:
            warnings.append("finetune: encoder initialised from a causal teacher (masked is the matching architecture)")
        if plan.decoder_teacher is TeacherChoice.MASKED:
            warnings.append("finetune: decoder initialised from a masked teacher (causal is the matching architecture)")
        if uses_sides:
            experimental = True
            warnings.append("experimental: fine-tuning combined with fusion/distillation")

    depths = {"encoder": model_config.enc_depth, "decoder": model_config.dec_depth}
    choices = {"encoder": plan.encoder_teacher, "decoder": plan.decoder_teacher}
    needed: Dict[str, List[str]] = {"encoder": [], "decoder": []}
    if plan.mode is not PlanMode.BASELINE:
        for side in ("encoder", "decoder"):
            if getattr(plan.fusion_side, side):
                needed[side].append("fusion")
            if getattr(plan.distill_side, side):
                needed[side].append("distill")
        if plan.mode is PlanMode.FINETUNE:
            for side in ("encoder", "decoder"):
                if choices[side] is not TeacherChoice.NONE:
                    needed[side].append("finetune")

    added = 0
    for side in ("encoder", "decoder"):
        uses = needed[side]
        if not uses:
            continue
        if choices[side] is TeacherChoice.NONE:
            if uses != ["finetune"]:
                violations.append(f"{side} {'/'.join(uses)} needs a {side}_teacher")
            continue
        teacher = teachers.get(_teacher_language(side), choices[side].value) if teachers is not None else None
        if teachers is not None and teacher is None:
            violations.append(f"{side}_teacher ({_teacher_language(side)}, {choices[side].value}) is not loaded")
        for use in uses:
            if use == "finetune":
                continue
            selector = plan.fusion_layers if use == "fusion" else plan.distill_layers
            try:
                layers = resolve_layers(selector, depths[side])
            except PlanError as exc:
                violations.extend(exc.violations)
                continue
            if not layers:
                warnings.append(f"{use} layer selector {selector!r} is empty at {side} depth {depths[side]}")
            attachments[f"{use}_{side}"] = layers
            if teacher is None:
                continue
            if use == "fusion":
                added += _fusion_parameters(teacher, model_config.d_model)
            elif not plan.has(Ablation.NO_SENT_DISTILL) and teacher.d_model != model_config.d_model:
                violations.append(f"sentence-level distillation on the {side} needs teacher d_model "
                                  f"{teacher.d_model} to equal student d_model {model_config.d_model}")
            if teacher.config.vocab != (model_config.src_vocab if side == "encoder" else model_config.tgt_vocab):
                violations.append(f"{side}_teacher vocabulary size {teacher.config.vocab} differs from the student's")

    if plan.fusion_side.decoder and plan.mode is not PlanMode.BASELINE:
        warnings.append(DECODER_FUSION_CAVEAT)
    if plan.distill_side is not Side.NONE and plan.mode is not PlanMode.BASELINE:
        if plan.has(Ablation.NO_SENT_DISTILL) and (plan.has(Ablation.NO_WORD_DISTILL) or not plan.distill_side.decoder):
            violations.append("distillation is enabled but every distillation term is ablated")
    if plan.fusion_side is Side.NONE and (plan.has(Ablation.NO_GATING) or plan.has(Ablation.NO_LAYER_ATTENTION)):
        warnings.append("fusion ablations have no effect without fusion")

    return PlanReport(
        valid=not violations,
        violations=violations,
        warnings=warnings,
        attachments=attachments,
        added_parameters=added if teachers is not None else None,
        active_losses=_active_losses(plan),
        experimental=experimental,
    )


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

_LAYER_PARTS = ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2"]


def _finetune_mapping(student: TransformerModel, teacher: PretrainedModel, side: str) -> Dict[str, str]:
    """student parameter name -> teacher parameter name."""
    mapping: Dict[str, str] = {}
    if side == "encoder":
        mapping["src_embed"] = "embed"
        depth, prefix = student.config.enc_depth, "enc"
        rename = {"attn": "attn", "ln_attn": "ln_attn"}
    else:
        mapping["tgt_embed"] = "embed"
        depth, prefix = student.config.dec_depth, "dec"
        rename = {"attn": "self_attn", "ln_attn": "ln_self"}
        mapping["out.w"] = "lm_head.w"
        mapping["out.b"] = "lm_head.b"
    for i in range(min(depth, teacher.depth)):
        for part in _LAYER_PARTS:
            block, proj = part.split(".")
            for leaf in ("w", "b"):
                mapping[f"{prefix}.{i}.{rename.get(block, block)}.{proj}.{leaf}"] = f"stack.{i}.{block}.{proj}.{leaf}"
        for norm in ("ln_attn", "ln_ffn"):
            for leaf in ("gain", "bias"):
                mapping[f"{prefix}.{i}.{rename.get(norm, norm)}.{leaf}"] = f"stack.{i}.{norm}.{leaf}"
    return mapping


def apply_finetune(student: TransformerModel, encoder_teacher: Optional[PretrainedModel] = None,
                   decoder_teacher: Optional[PretrainedModel] = None) -> Dict[str, List[str]]:
    """
    Initialise student parameters from teachers.

    The encoder takes the teacher embedding and the first min(N, L) layers;
    the decoder takes the embedding, self-attention, feed-forward and LM head
    (cross-attention has no counterpart and stays freshly initialised).
    Every shape is checked before anything is copied.

    Returns:
    --------
    dict
        {"encoder": [copied names], "decoder": [copied names]}
    """
    if encoder_teacher is None and decoder_teacher is None:
        raise FinetuneError("fine-tuning needs at least one teacher")
    plans: List[Tuple[str, PretrainedModel, Dict[str, str]]] = []
    for side, teacher in (("encoder", encoder_teacher), ("decoder", decoder_teacher)):
        if teacher is not None:
            plans.append((side, teacher, _finetune_mapping(student, teacher, side)))
    for side, teacher, mapping in plans:
        for target, source in mapping.items():
            want = student.params[target].shape
            have = teacher.params[source].shape
            if want != have:
                raise FinetuneError(f"{side}: teacher tensor {source} {have} does not fit student tensor {target} {want}")
    copied: Dict[str, List[str]] = {"encoder": [], "decoder": []}
    for side, teacher, mapping in plans:
        for target, source in mapping.items():
            student.params.assign(target, teacher.params[source].data)
            copied[side].append(target)
    return copied


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------

class TrainingStep:
    """
    Batch -> LossBundle for one validated plan.

    Building the step creates the fusion banks inside the student's
    parameter registry, so the optimizer and checkpoints cover them.
    ``last_traces`` holds the fusion trace of the most recent encode and
    decode; when threads share the step it is whichever call finished last.
    """

    def __init__(self, plan: IntegrationPlan, model: TransformerModel, teachers: Optional[TeacherPool] = None,
                 seed: int = 0, zero_init: bool = True, teacher_mode: str = "exact", exact_cap: int = 64,
                 cache=None):
        self.plan = plan
        self.model = model
        self.teachers = teachers if teachers is not None else TeacherPool()
        self.teacher_mode = teacher_mode
        self.exact_cap = exact_cap
        self.cache = cache
        self.last_traces: Dict[str, FusionTrace] = {}
        self._trace_lock = threading.Lock()
        cfg = model.config
        apt = plan.mode is not PlanMode.BASELINE
        self.encoder_teacher = self._teacher("encoder") if apt else None
        self.decoder_teacher = self._teacher("decoder") if apt else None
        ablations = dict(no_gating=plan.has(Ablation.NO_GATING),
                         no_layer_attention=plan.has(Ablation.NO_LAYER_ATTENTION))

        self.encoder_bank: Optional[FusionBank] = None
        self.decoder_bank: Optional[FusionBank] = None
        if apt and plan.fusion_side.encoder:
            t = self._require(self.encoder_teacher, "encoder")
            self.encoder_bank = FusionBank(model.params, "fusion.encoder", t.depth, t.d_model, cfg.d_model,
                                           resolve_layers(plan.fusion_layers, cfg.enc_depth), seed=seed,
                                           zero_init=zero_init, **ablations)
        if apt and plan.fusion_side.decoder:
            t = self._require(self.decoder_teacher, "decoder")
            self.decoder_bank = FusionBank(model.params, "fusion.decoder", t.depth, t.d_model, cfg.d_model,
                                           resolve_layers(plan.fusion_layers, cfg.dec_depth), seed=seed + 1,
                                           zero_init=zero_init, **ablations)

        distill = plan.distill_side if apt else Side.NONE
        self.encoder_distill_layers = resolve_layers(plan.distill_layers, cfg.enc_depth) if distill.encoder else []
        self.decoder_distill_layers = resolve_layers(plan.distill_layers, cfg.dec_depth) if distill.decoder else []
        self.sent_distill = not plan.has(Ablation.NO_SENT_DISTILL)
        self.word_distill = distill.decoder and not plan.has(Ablation.NO_WORD_DISTILL)
        if distill.encoder:
            self._require(self.encoder_teacher, "encoder")
        if distill.decoder:
            self._require(self.decoder_teacher, "decoder")

    def _teacher(self, side: str) -> Optional[PretrainedModel]:
        choice = self.plan.encoder_teacher if side == "encoder" else self.plan.decoder_teacher
        if choice is TeacherChoice.NONE:
            return None
        return self.teachers.get(_teacher_language(side), choice.value)

    def _require(self, teacher: Optional[PretrainedModel], side: str) -> PretrainedModel:
        if teacher is None:
            raise PlanError(f"plan needs a {side} teacher that is not loaded", [f"{side} teacher missing"])
        return teacher

    @property
    def parameter_count(self) -> int:
        return self.model.params.count()

    @property
    def added_parameters(self) -> int:
        return self.model.params.count("fusion.")

    @property
    def active_losses(self) -> List[str]:
        losses = ["l_t"]
        if self.sent_distill and (self.encoder_distill_layers or self.decoder_distill_layers):
            losses.append("l_s")
        if self.word_distill:
            losses.append("l_w")
        return losses

    def encode(self, src, training: bool = False) -> EncoderState:
        if self.encoder_bank is None:
            return self.model.encode(src, training=training)
        enc, trace = fused_encode(self.model, src, self.encoder_teacher, self.encoder_bank,
                                  training=training, cache=self.cache)
        with self._trace_lock:
            self.last_traces["encoder"] = trace
        return enc

    def decode(self, prefix, enc: EncoderState, training: bool = False):
        hook = None
        if self.decoder_bank is not None:
            hook, trace = decoder_fusion_hook(self.decoder_bank, self.decoder_teacher, prefix, cache=self.cache)
            with self._trace_lock:
                self.last_traces["decoder"] = trace
        return self.model.decode(prefix, enc, training=training, layer_hook=hook)

    def __call__(self, batch: Batch, training: bool = True) -> LossBundle:
        enc = self.encode(batch.src, training=training)
        logits, dec = self.decode(batch.tgt_in, enc, training=training)
        l_t = translation_loss(logits, batch.tgt_out, self.model.config.label_smoothing)

        l_s: Optional[Tensor] = None
        if self.sent_distill and self.encoder_distill_layers:
            l_s = encoder_sent_distill(enc, self.encoder_teacher, batch.src,
                                       layers=self.encoder_distill_layers, cache=self.cache)
        if self.sent_distill and self.decoder_distill_layers:
            dec_s = decoder_sent_distill(dec, self.decoder_teacher, batch.tgt_in,
                                         layers=self.decoder_distill_layers, cache=self.cache)
            l_s = dec_s if l_s is None else tc.add(l_s, dec_s)

        l_w: Optional[Tensor] = None
        if self.word_distill:
            teacher = teacher_distribution(self.decoder_teacher, batch.tgt_out, mode=self.teacher_mode,
                                           exact_cap=self.exact_cap, cache=self.cache)
            probs = teacher.probs if teacher.probs.dtype == logits.dtype else Tensor(teacher.probs.data, dtype=logits.dtype)
            l_w = word_distill_loss(logits, probs, mask=batch.tgt_mask)

        return joint_loss(l_t, l_s, l_w, eta=self.plan.eta, beta=self.plan.beta)

    def translator(self) -> "Translator":
        return Translator(self)


def build_training_step(plan: IntegrationPlan, model: TransformerModel, teachers: Optional[TeacherPool] = None,
                        **options) -> TrainingStep:
    """Validate ``plan`` and compose the per-batch loss it describes."""
    report = validate_plan(plan, model.config, teachers)
    if not report.valid:
        raise PlanError("invalid integration plan: " + "; ".join(report.violations), report.violations)
    return TrainingStep(plan, model, teachers, **options)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

class Translator:
    """
    Plan-aware scorer for beam search.

    ``start`` encodes one source sentence (eos is appended); ``next_log_probs``
    returns next-token log-probabilities for a set of equal-length prefixes.
    """

    def __init__(self, step: Union[TrainingStep, TransformerModel]):
        if isinstance(step, TransformerModel):
            step = TrainingStep(IntegrationPlan.baseline(), step)
        self.step = step
        self.model = step.model

    @property
    def max_len(self) -> int:
        return self.model.config.max_len

    @property
    def vocab_size(self) -> int:
        return self.model.config.tgt_vocab

    def start(self, source: Sequence[int]) -> EncoderState:
        ids = np.asarray(list(source) + [EOS_ID], dtype=np.int64)[None, :]
        with tc.no_grad():
            return self.step.encode(ids, training=False)

    def next_log_probs(self, enc: EncoderState, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        prefix = np.asarray(prefixes, dtype=np.int64)
        count = prefix.shape[0]
        tiled = EncoderState(
            layers=[Tensor(np.repeat(enc.output.data, count, axis=0), dtype=enc.output.dtype)],
            mask=np.repeat(enc.mask, count, axis=0),
        )
        with tc.no_grad():
            logits, _ = self.step.decode(prefix, tiled, training=False)
        return special.log_softmax(logits.data[:, -1, :].astype(np.float64), axis=-1)


# ---------------------------------------------------------------------------
# ablation suites
# ---------------------------------------------------------------------------

def _plan(**overrides) -> IntegrationPlan:
    return IntegrationPlan(**overrides)


def _table3() -> Dict[str, IntegrationPlan]:
    fusion_variants = [
        ("", ()),
        ("_no_gating", (Ablation.NO_GATING,)),
        ("_no_layer_attention", (Ablation.NO_LAYER_ATTENTION,)),
        ("_no_gating_no_layer_attention", (Ablation.NO_GATING, Ablation.NO_LAYER_ATTENTION)),
    ]
    cells = {"baseline": IntegrationPlan.baseline()}
    for suffix, ablations in fusion_variants:
        cells[f"fusion{suffix}"] = _plan(distill_side=Side.NONE, ablations=ablations)
    for suffix, ablations in fusion_variants:
        cells[f"fusion_kd{suffix}"] = _plan(ablations=ablations)
    cells["kd"] = _plan(fusion_side=Side.NONE, encoder_teacher=TeacherChoice.NONE)
    cells["kd_no_word"] = _plan(fusion_side=Side.NONE, encoder_teacher=TeacherChoice.NONE,
                                ablations=(Ablation.NO_WORD_DISTILL,))
    cells["kd_no_sent"] = _plan(fusion_side=Side.NONE, encoder_teacher=TeacherChoice.NONE,
                                ablations=(Ablation.NO_SENT_DISTILL,))
    cells["fusion_kd_no_word"] = _plan(ablations=(Ablation.NO_WORD_DISTILL,))
    cells["fusion_kd_no_sent"] = _plan(ablations=(Ablation.NO_SENT_DISTILL,))
    return cells


def _table5() -> Dict[str, IntegrationPlan]:
    encoder_only = dict(decoder_teacher=TeacherChoice.NONE)
    decoder_only = dict(encoder_teacher=TeacherChoice.NONE)
    return {
        "baseline": IntegrationPlan.baseline(),
        "encoder_fusion": _plan(fusion_side=Side.ENCODER, distill_side=Side.NONE, **encoder_only),
        "encoder_kd": _plan(fusion_side=Side.NONE, distill_side=Side.ENCODER, **encoder_only),
        "encoder_fusion_kd": _plan(fusion_side=Side.ENCODER, distill_side=Side.ENCODER, **encoder_only),
        "decoder_fusion": _plan(fusion_side=Side.DECODER, distill_side=Side.NONE, **decoder_only),
        "decoder_kd": _plan(fusion_side=Side.NONE, distill_side=Side.DECODER, **decoder_only),
        "decoder_fusion_kd": _plan(fusion_side=Side.DECODER, distill_side=Side.DECODER, **decoder_only),
    }


def _table6() -> Dict[str, IntegrationPlan]:
    cells = {"baseline": IntegrationPlan.baseline()}
    for selector in ("embedding", "middle", "output", "all"):
        cells[f"fusion_{selector}"] = _plan(distill_side=Side.NONE, decoder_teacher=TeacherChoice.NONE,
                                            fusion_layers=selector)
    for selector in ("embedding", "middle", "output", "all"):
        cells[f"kd_{selector}"] = _plan(fusion_side=Side.NONE, encoder_teacher=TeacherChoice.NONE,
                                        distill_layers=selector)
    return cells


SUITES = {"table3": _table3, "table5": _table5, "table6": _table6}


def ablation_suite(name: str) -> Dict[str, IntegrationPlan]:
    """Ordered {cell_name: plan} for a named suite; the first cell is always the baseline."""
    if name not in SUITES:
        raise ConfigError(f"unknown ablation suite {name!r}; choose from {sorted(SUITES)}")
    return SUITES[name]()

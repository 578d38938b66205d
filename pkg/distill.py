"""
Knowledge distillation losses and the joint objective.

All losses are minimised quantities:

    l_t   translation loss (negated log-likelihood, optionally label-smoothed)
    l_w   word-level KD: cross-entropy H(teacher, student) per target token
    l_s   sentence-level KD: squared L2 distance between student states and
          the teacher's top layer, per token
    total = l_t + eta * l_s + beta * l_w

Per-token means divide by the number of non-pad positions in the batch.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

import tensor_core as tc
from data import PAD_ID
from errors import DistillationError, NumericError, ShapeError
from pretrain import PretrainedModel, teacher_representations
from tensor_core import Tensor
from transformer_core import DecoderState, EncoderState, as_batch

DEFAULT_ETA = 0.5
DEFAULT_BETA = 0.5


@dataclass
class LossBundle:
    l_t: Tensor
    l_s: Optional[Tensor]
    l_w: Optional[Tensor]
    eta: float
    beta: float
    total: Tensor

    @property
    def active(self) -> List[str]:
        names = ["l_t"]
        if self.l_s is not None:
            names.append("l_s")
        if self.l_w is not None:
            names.append("l_w")
        return names

    def values(self) -> Dict[str, float]:
        """Plain floats; absent terms report 0.0."""
        return {
            "l_t": self.l_t.item(),
            "l_s": self.l_s.item() if self.l_s is not None else 0.0,
            "l_w": self.l_w.item() if self.l_w is not None else 0.0,
            "total": self.total.item(),
        }


def _token_mask(shape, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise ShapeError(f"mask {mask.shape} does not match positions {tuple(shape)}")
    return mask


def word_distill_loss(student_logits: Tensor, teacher_probs: Tensor, mask: Optional[np.ndarray] = None,
                      tolerance: float = 1e-4) -> Tensor:
    """(1/J) sum_j sum_k -P_teacher(k) log P_student(k); teacher rows are constants."""
    if student_logits.shape != teacher_probs.shape:
        raise ShapeError(f"student logits {student_logits.shape} vs teacher distribution {teacher_probs.shape}")
    mask = _token_mask(student_logits.shape[:-1], mask)
    count = int(mask.sum())
    if count == 0:
        raise DistillationError("no positions to distill")
    teacher = teacher_probs.data
    row_sums = teacher.sum(axis=-1)
    if np.any(np.abs(row_sums[mask] - 1.0) > tolerance) or np.any(teacher < 0):
        raise DistillationError("teacher rows are not probability distributions")
    weights = np.where(mask[..., None], teacher, 0.0)
    log_probs = tc.log_softmax(student_logits, axis=-1)
    return tc.scale(tc.sum_(tc.mul(log_probs, tc.constant_like(weights, log_probs))), -1.0 / count)


def sent_distill_loss(student_reps: Tensor, teacher_reps: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """(1/J) sum_j ||r_student_j - r_teacher_j||^2 with the teacher side detached."""
    if student_reps.shape[-1] != teacher_reps.shape[-1]:
        raise DistillationError(
            f"sentence-level distillation needs equal widths: student {student_reps.shape[-1]}, "
            f"teacher {teacher_reps.shape[-1]}; configure the teacher d_model to match the student")
    if student_reps.shape != teacher_reps.shape:
        raise ShapeError(f"student states {student_reps.shape} vs teacher states {teacher_reps.shape}")
    mask = _token_mask(student_reps.shape[:-1], mask)
    count = int(mask.sum())
    if count == 0:
        raise DistillationError("no positions to distill")
    target = tc.constant_like(teacher_reps.data, student_reps)
    diff = tc.mul(tc.sub(student_reps, target), tc.constant_like(np.broadcast_to(mask[..., None], student_reps.shape).astype(np.float64), student_reps))
    return tc.scale(tc.sum_(tc.mul(diff, diff)), 1.0 / count)


def joint_loss(l_t: Tensor, l_s: Optional[Tensor] = None, l_w: Optional[Tensor] = None,
               eta: float = DEFAULT_ETA, beta: float = DEFAULT_BETA) -> LossBundle:
    """
    total = l_t + eta * l_s + beta * l_w.

    Terms that are absent, or whose weight is zero, are left out of the
    graph; their values are still reported.
    """
    if eta < 0 or beta < 0:
        raise DistillationError(f"eta and beta must be non-negative, got eta={eta}, beta={beta}")
    for name, term in (("l_t", l_t), ("l_s", l_s), ("l_w", l_w)):
        if term is not None:
            if term.size != 1:
                raise ShapeError(f"{name} must be a scalar, got shape {term.shape}")
            if not math.isfinite(term.item()):
                raise NumericError(f"{name} is not finite")
    total = l_t
    if l_s is not None and eta != 0:
        total = tc.add(total, tc.scale(l_s, eta))
    if l_w is not None and beta != 0:
        total = tc.add(total, tc.scale(l_w, beta))
    return LossBundle(l_t=l_t, l_s=l_s, l_w=l_w, eta=eta, beta=beta, total=total)


def _layers_sent_distill(student_layers: List[Tensor], teacher_top: Tensor, mask: np.ndarray,
                         layers: Sequence[int]) -> Tensor:
    if not layers:
        raise DistillationError("no student layers selected for sentence-level distillation")
    losses = []
    for n in layers:
        if not 0 <= n < len(student_layers):
            raise DistillationError(f"layer {n} is outside the student stack (0..{len(student_layers) - 1})")
        losses.append(sent_distill_loss(student_layers[n], teacher_top, mask))
    total = losses[0]
    for loss in losses[1:]:
        total = tc.add(total, loss)
    return tc.scale(total, 1.0 / len(losses)) if len(losses) > 1 else total


def encoder_sent_distill(enc: EncoderState, src_teacher: PretrainedModel, x,
                         layers: Optional[Sequence[int]] = None, cache=None) -> Tensor:
    """Sentence-level KD between encoder layers (default R^E_N) and the source teacher's R^P_L."""
    ids = as_batch(x)
    if ids.shape != enc.mask.shape:
        raise ShapeError(f"source ids {ids.shape} do not match the encoder state {enc.mask.shape}")
    teacher_top = teacher_representations(src_teacher, ids, cache=cache)[-1]
    return _layers_sent_distill(enc.layers, teacher_top, enc.mask, layers if layers is not None else [enc.depth])


def decoder_sent_distill(dec: DecoderState, tgt_teacher: PretrainedModel, y_in,
                         layers: Optional[Sequence[int]] = None, cache=None) -> Tensor:
    """Sentence-level KD between decoder layers (default R^D_M) and the target teacher's R^P_L on [bos] + y."""
    ids = as_batch(y_in)
    if ids.shape != dec.mask.shape:
        raise ShapeError(f"target ids {ids.shape} do not match the decoder state {dec.mask.shape}")
    teacher_top = teacher_representations(tgt_teacher, ids, cache=cache)[-1]
    default = [len(dec.layers) - 1]
    return _layers_sent_distill(dec.layers, teacher_top, ids != PAD_ID, layers if layers is not None else default)

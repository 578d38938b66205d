"""
Dynamic fusion of frozen teacher layers into student layers.

For every attached student layer n:

    R^T_l   = G_l(R^P_l)                               (per-layer adapter)
    e_l     = s_layer(mean_i r^T_{l,i} * mean_i r^E_{n,i})
    alpha   = softmax(e)
    C^T_n   = sum_l alpha_l R^T_l
    gamma_i = sigmoid(s_gate(r^E_{n,i} * c^T_{n,i}))
    out_i   = r^E_{n,i} + gamma_i c^T_{n,i}

``*`` between vectors is the elementwise product; s_layer and s_gate are
affine maps to a scalar. Adapter output layers start at zero, so a freshly
attached bank leaves the student's forward pass unchanged.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

import tensor_core as tc
from data import PAD_ID
from errors import FusionError, ShapeError
from pretrain import PretrainedModel, teacher_representations
from tensor_core import Parameters, Tensor
from transformer_core import EncoderState, Linear, TransformerModel, as_batch


class FusionBank:
    """
    Trainable fusion parameters for one side of the student.

    Parameters:
    -----------
    params : Parameters
        Registry the bank adds its tensors to (normally the student's)
    prefix : str
        Name prefix, e.g. "fusion.encoder"
    n_teacher_layers : int
        L, one adapter per teacher layer
    d_teacher, d_model : int
        Teacher and student widths
    attach : iterable of int
        Student layer indices (0 = embedding) whose outputs are fused
    zero_init : bool
        Zero the adapter output layers (identity start)
    """

    def __init__(self, params: Parameters, prefix: str, n_teacher_layers: int, d_teacher: int, d_model: int,
                 attach: Iterable[int] = (), seed: int = 0, zero_init: bool = True,
                 no_gating: bool = False, no_layer_attention: bool = False):
        if n_teacher_layers < 1:
            raise FusionError("a fusion bank needs at least one teacher layer")
        rng = np.random.default_rng([seed, 17])
        self.prefix = prefix
        self.n_teacher_layers = n_teacher_layers
        self.d_teacher = d_teacher
        self.d_model = d_model
        self.attach = frozenset(int(n) for n in attach)
        self.no_gating = no_gating
        self.no_layer_attention = no_layer_attention
        self.gate_override: Optional[float] = None
        self.adapters: List[Tuple[Linear, Linear]] = [
            (Linear(params, f"{prefix}.adapter.{l}.w1", d_teacher, d_model, rng),
             Linear(params, f"{prefix}.adapter.{l}.w2", d_model, d_model, rng, zero=zero_init))
            for l in range(n_teacher_layers)
        ]
        self.layer_scorer = Linear(params, f"{prefix}.layer_scorer", d_model, 1, rng)
        self.gate_scorer = Linear(params, f"{prefix}.gate_scorer", d_model, 1, rng)
        self.params = params

    def parameter_count(self) -> int:
        return self.params.count(self.prefix + ".")

    def check_teacher(self, teacher: PretrainedModel):
        if teacher.depth != self.n_teacher_layers:
            raise FusionError(f"bank has {self.n_teacher_layers} adapters, teacher has {teacher.depth} layers")
        if teacher.d_model != self.d_teacher:
            raise FusionError(f"bank expects teacher width {self.d_teacher}, teacher has {teacher.d_model}")


@dataclass
class FusionRecord:
    alpha: np.ndarray
    composite: np.ndarray
    gates: np.ndarray
    fused: np.ndarray


@dataclass
class FusionTrace:
    """Per attached layer: alpha [B, L], C^T_n, gamma [B, K] and the fused state."""

    layers: Dict[int, FusionRecord] = field(default_factory=dict)

    def alpha_sums(self) -> List[np.ndarray]:
        return [record.alpha.sum(axis=-1) for record in self.layers.values()]

    def gate_range(self) -> Tuple[float, float]:
        if not self.layers:
            return (float("nan"), float("nan"))
        gates = np.concatenate([r.gates.ravel() for r in self.layers.values()])
        return float(gates.min()), float(gates.max())


def adapt(teacher_layers: List[Tensor], bank: FusionBank) -> List[Tensor]:
    """R^T_l = G_l(R^P_l), position-wise two-layer MLP with ReLU."""
    if len(teacher_layers) != bank.n_teacher_layers:
        raise FusionError(f"got {len(teacher_layers)} teacher layers, bank has {bank.n_teacher_layers} adapters")
    adapted = []
    for layer, (w1, w2) in zip(teacher_layers, bank.adapters):
        if layer.shape[-1] != bank.d_teacher:
            raise FusionError(f"teacher layer width {layer.shape[-1]} does not match adapter input {bank.d_teacher}")
        adapted.append(w2(tc.relu(w1(layer))))
    return adapted


def _masked_mean(x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    """Mean over the position axis of [B, K, d], counting only real positions."""
    if mask is None:
        return tc.mean(x, axis=1)
    mask = np.asarray(mask, dtype=bool)
    counts = np.maximum(mask.sum(axis=1, keepdims=True), 1).astype(np.float64)
    weights = np.broadcast_to(mask[:, :, None], x.shape).astype(np.float64)
    summed = tc.sum_(tc.mul(x, tc.constant_like(weights, x)), axis=1)
    return tc.mul(summed, tc.constant_like(np.broadcast_to(1.0 / counts, summed.shape), summed))


def layer_attention(adapted: List[Tensor], student_layer: Tensor, bank: FusionBank,
                    mask: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
    """Composite C^T_n [B, K, d] and attention weights alpha [B, L] over the adapted layers."""
    if not adapted:
        raise FusionError("layer attention needs at least one adapted layer")
    first = adapted[0]
    for layer in adapted[1:]:
        if layer.shape != first.shape:
            raise ShapeError(f"adapted layers differ in shape: {first.shape} vs {layer.shape}")
    if student_layer.ndim != 3 or student_layer.shape[-1] != first.shape[-1]:
        raise ShapeError(f"student layer {student_layer.shape} does not match adapted width {first.shape[-1]}")
    batch, length, width = first.shape
    n_layers = len(adapted)

    if bank.no_layer_attention:
        alpha = Tensor(np.full((batch, n_layers), 1.0 / n_layers), dtype=first.dtype)
    else:
        student_mean = _masked_mean(student_layer, mask)
        scores = [bank.layer_scorer(tc.mul(_masked_mean(layer, mask), student_mean)) for layer in adapted]
        alpha = tc.softmax(tc.reshape(tc.stack(scores, axis=1), (batch, n_layers)), axis=-1)

    stacked = tc.reshape(tc.stack(adapted, axis=1), (batch, n_layers, length * width))
    composite = tc.matmul(tc.reshape(alpha, (batch, 1, n_layers)), stacked)
    return tc.reshape(composite, (batch, length, width)), alpha


def gate_fuse(student_layer: Tensor, composite: Tensor, bank: FusionBank) -> Tuple[Tensor, Tensor]:
    """r_bar = r + gamma * c with per-position gates gamma [B, K]."""
    if student_layer.shape != composite.shape:
        raise ShapeError(f"gate_fuse: student {student_layer.shape} vs composite {composite.shape}")
    batch, length, width = student_layer.shape
    if bank.no_gating:
        gates = Tensor(np.ones((batch, length, 1)), dtype=student_layer.dtype)
    elif bank.gate_override is not None:
        gates = Tensor(np.full((batch, length, 1), bank.gate_override), dtype=student_layer.dtype)
    else:
        gates = tc.sigmoid(bank.gate_scorer(tc.mul(student_layer, composite)))
    fused = tc.add(student_layer, tc.mul(tc.expand(gates, student_layer.shape), composite))
    return fused, tc.reshape(gates, (batch, length))


def fusion_hook(bank: FusionBank, adapted: List[Tensor], mask: np.ndarray,
                trace: FusionTrace) -> Callable[[int, Tensor], Tensor]:
    """Layer hook replacing attached layer outputs by their fused version."""
    def hook(n: int, state: Tensor) -> Tensor:
        if n not in bank.attach:
            return state
        if state.shape[1] != adapted[0].shape[1]:
            raise FusionError(f"teacher sequence length {adapted[0].shape[1]} does not align with "
                              f"student length {state.shape[1]} (tokenizations must match)")
        composite, alpha = layer_attention(adapted, state, bank, mask)
        fused, gates = gate_fuse(state, composite, bank)
        trace.layers[n] = FusionRecord(alpha=alpha.data.copy(), composite=composite.data.copy(),
                                       gates=gates.data.copy(), fused=fused.data.copy())
        return fused
    return hook


def _teacher_inputs(ids: np.ndarray, teacher_tokens) -> np.ndarray:
    teacher_ids = as_batch(teacher_tokens) if teacher_tokens is not None else ids
    if teacher_ids.shape != ids.shape:
        raise FusionError(f"teacher tokens {teacher_ids.shape} do not align with student tokens {ids.shape}")
    return teacher_ids


def fused_encode(model: TransformerModel, x, teacher: PretrainedModel, bank: FusionBank, teacher_tokens=None,
                 training: bool = False, cache=None) -> Tuple[EncoderState, FusionTrace]:
    """
    Encode with teacher knowledge fused into the attached layers.

    With an empty attachment set the teacher is not consulted and the result
    is a plain ``model.encode``.
    """
    ids = as_batch(x)
    trace = FusionTrace()
    if not bank.attach:
        return model.encode(ids, training=training), trace
    bank.check_teacher(teacher)
    teacher_ids = _teacher_inputs(ids, teacher_tokens)
    adapted = adapt(teacher_representations(teacher, teacher_ids, cache=cache), bank)
    hook = fusion_hook(bank, adapted, ids != PAD_ID, trace)
    return model.encode(ids, training=training, layer_hook=hook), trace


def decoder_fusion_hook(bank: FusionBank, teacher: PretrainedModel, prefix,
                        cache=None) -> Tuple[Optional[Callable[[int, Tensor], Tensor]], FusionTrace]:
    """
    Hook for ``model.decode`` fusing the target-side teacher run on ``prefix``.

    During training the prefix is the gold ``[bos] + y``; at inference it is
    the generated prefix, which is all the teacher can see there.
    """
    trace = FusionTrace()
    if not bank.attach:
        return None, trace
    bank.check_teacher(teacher)
    ids = as_batch(prefix)
    adapted = adapt(teacher_representations(teacher, ids, cache=cache), bank)
    return fusion_hook(bank, adapted, ids != PAD_ID, trace), trace

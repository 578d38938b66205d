"""
Transformer encoder-decoder with per-layer states.

Post-norm layers: every sub-layer output is added to its input and then
layer-normalised. Encoder and decoder keep every intermediate layer output so
that fusion and distillation can attach to any of them, and both accept a
``layer_hook`` that may replace a layer's output before the next layer runs.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

import tensor_core as tc
from data import BOS_ID, PAD_ID
from errors import SequenceError, SequenceLengthError, ShapeError
from tensor_core import Parameters, Tensor

NEG_INF = -1e9

LayerHook = Callable[[int, Tensor], Tensor]


class ModelConfig(BaseModel):
    """Student model hyperparameters (desk-scale defaults)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    d_model: int = 64
    n_heads: int = 4
    enc_depth: int = 2
    dec_depth: int = 2
    d_ff: int = 128
    src_vocab: int = 512
    tgt_vocab: int = 512
    dropout: float = 0.1
    label_smoothing: float = 0.1
    max_len: int = 64
    layer_norm_eps: float = 1e-5

    @model_validator(mode="after")
    def _check(self):
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.enc_depth < 1 or self.dec_depth < 1:
            raise ValueError("enc_depth and dec_depth must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.src_vocab < 5 or self.tgt_vocab < 5:
            raise ValueError("vocabularies must hold at least the five reserved tokens")
        if self.max_len < 2 or self.d_ff < 1:
            raise ValueError("max_len must be >= 2 and d_ff >= 1")
        return self


@dataclass
class EncoderState:
    """R^E_0 ... R^E_N for a padded batch, plus per-layer attention weights."""

    layers: List[Tensor]
    mask: np.ndarray
    attentions: List[np.ndarray] = field(default_factory=list)

    @property
    def output(self) -> Tensor:
        return self.layers[-1]

    @property
    def depth(self) -> int:
        return len(self.layers) - 1

    @property
    def length(self) -> int:
        return self.mask.shape[1]


@dataclass
class DecoderState:
    """R^D_0 ... R^D_M with the self-attention (S^D) and cross-attention (C^D) outputs."""

    layers: List[Tensor]
    self_outputs: List[Tensor]
    cross_outputs: List[Tensor]
    mask: np.ndarray
    self_attentions: List[np.ndarray] = field(default_factory=list)
    cross_attentions: List[np.ndarray] = field(default_factory=list)

    @property
    def output(self) -> Tensor:
        return self.layers[-1]

    @property
    def length(self) -> int:
        return self.mask.shape[1]


@lru_cache(maxsize=16)
def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Fixed sinusoidal table: sin on even columns, cos on odd columns."""
    positions = np.arange(length, dtype=np.float64)[:, None]
    rates = np.power(10000.0, np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.zeros((length, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(positions / rates)
    table[:, 1::2] = np.cos(positions / rates[: d_model // 2])
    table.setflags(write=False)
    return table


def as_batch(ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ShapeError(f"expected an id sequence or a [batch, length] array, got shape {ids.shape}")
    return ids


def attention_mask(key_mask: np.ndarray, query_len: int, causal: bool) -> np.ndarray:
    """Boolean [B, T, S] array, True where attention is blocked."""
    blocked = ~key_mask[:, None, :].astype(bool)
    blocked = np.broadcast_to(blocked, (key_mask.shape[0], query_len, key_mask.shape[1]))
    if causal:
        future = np.triu(np.ones((query_len, key_mask.shape[1]), dtype=bool), k=1)
        blocked = blocked | future[None, :, :]
    return blocked


def embed_tokens(weight: Tensor, ids: np.ndarray, max_len: int) -> Tensor:
    """Embedding lookup scaled by sqrt(d_model) plus the positional table."""
    if ids.shape[-1] > max_len:
        raise SequenceLengthError(f"sequence length {ids.shape[-1]} exceeds max_len {max_len}")
    d_model = weight.shape[1]
    looked_up = tc.embedding(weight, ids)
    table = positional_encoding(max_len, d_model)[: ids.shape[-1]]
    table = np.broadcast_to(table, looked_up.shape)
    return tc.add(tc.scale(looked_up, math.sqrt(d_model)), tc.constant_like(table, looked_up))


class Linear:
    def __init__(self, params: Parameters, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, zero: bool = False):
        if zero:
            weight = np.zeros((d_in, d_out))
        else:
            limit = math.sqrt(6.0 / (d_in + d_out))
            weight = rng.uniform(-limit, limit, size=(d_in, d_out))
        self.weight = params.create(f"{name}.w", weight)
        self.bias = params.create(f"{name}.b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        y = tc.matmul(x, self.weight)
        return tc.add(y, tc.expand(self.bias, y.shape))


class LayerNorm:
    def __init__(self, params: Parameters, name: str, d_model: int, eps: float):
        self.gain = params.create(f"{name}.gain", np.ones(d_model))
        self.bias = params.create(f"{name}.bias", np.zeros(d_model))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention:
    def __init__(self, params: Parameters, name: str, d_model: int, n_heads: int,
                 rng: np.random.Generator):
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(params, f"{name}.wq", d_model, d_model, rng)
        self.wk = Linear(params, f"{name}.wk", d_model, d_model, rng)
        self.wv = Linear(params, f"{name}.wv", d_model, d_model, rng)
        self.wo = Linear(params, f"{name}.wo", d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        batch, length, _ = x.shape
        return tc.transpose(tc.reshape(x, (batch, length, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, memory: Tensor, blocked: np.ndarray) -> Tuple[Tensor, np.ndarray]:
        batch, length, d_model = query.shape
        q = self._split(self.wq(query))
        k = self._split(self.wk(memory))
        v = self._split(self.wv(memory))
        scores = tc.scale(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.d_head))
        scores = tc.masked_fill(scores, blocked[:, None, :, :], NEG_INF)
        weights = tc.softmax(scores, axis=-1)
        context = tc.transpose(tc.matmul(weights, v), (0, 2, 1, 3))
        context = tc.reshape(context, (batch, length, d_model))
        return self.wo(context), weights.data


class FeedForward:
    def __init__(self, params: Parameters, name: str, d_model: int, d_ff: int,
                 rng: np.random.Generator):
        self.w1 = Linear(params, f"{name}.w1", d_model, d_ff, rng)
        self.w2 = Linear(params, f"{name}.w2", d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(tc.relu(self.w1(x)))


class EncoderLayer:
    """Self-attention + feed-forward block; ``causal`` turns it into an LM decoder block."""

    def __init__(self, params: Parameters, name: str, d_model: int, n_heads: int, d_ff: int,
                 eps: float, rng: np.random.Generator, causal: bool = False):
        self.causal = causal
        self.attn = MultiHeadAttention(params, f"{name}.attn", d_model, n_heads, rng)
        self.ln_attn = LayerNorm(params, f"{name}.ln_attn", d_model, eps)
        self.ffn = FeedForward(params, f"{name}.ffn", d_model, d_ff, rng)
        self.ln_ffn = LayerNorm(params, f"{name}.ln_ffn", d_model, eps)

    def __call__(self, x: Tensor, key_mask: np.ndarray, rate: float,
                 rng: Optional[np.random.Generator], training: bool) -> Tuple[Tensor, np.ndarray]:
        blocked = attention_mask(key_mask, x.shape[1], self.causal)
        attended, weights = self.attn(x, x, blocked)
        hidden = self.ln_attn(tc.add(x, tc.dropout(attended, rate, rng, training)))
        out = self.ln_ffn(tc.add(hidden, tc.dropout(self.ffn(hidden), rate, rng, training)))
        return out, weights


class DecoderLayer:
    def __init__(self, params: Parameters, name: str, d_model: int, n_heads: int, d_ff: int,
                 eps: float, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(params, f"{name}.self_attn", d_model, n_heads, rng)
        self.ln_self = LayerNorm(params, f"{name}.ln_self", d_model, eps)
        self.cross_attn = MultiHeadAttention(params, f"{name}.cross_attn", d_model, n_heads, rng)
        self.ln_cross = LayerNorm(params, f"{name}.ln_cross", d_model, eps)
        self.ffn = FeedForward(params, f"{name}.ffn", d_model, d_ff, rng)
        self.ln_ffn = LayerNorm(params, f"{name}.ln_ffn", d_model, eps)

    def __call__(self, x: Tensor, tgt_mask: np.ndarray, memory: Tensor, src_mask: np.ndarray,
                 rate: float, rng: Optional[np.random.Generator], training: bool):
        length = x.shape[1]
        attended, self_weights = self.self_attn(x, x, attention_mask(tgt_mask, length, causal=True))
        s = self.ln_self(tc.add(x, tc.dropout(attended, rate, rng, training)))
        crossed, cross_weights = self.cross_attn(s, memory, attention_mask(src_mask, length, causal=False))
        c = self.ln_cross(tc.add(s, tc.dropout(crossed, rate, rng, training)))
        out = self.ln_ffn(tc.add(c, tc.dropout(self.ffn(c), rate, rng, training)))
        return out, s, c, self_weights, cross_weights


class TransformerModel:
    """
    The student encoder-decoder.

    Parameters live in one ``Parameters`` registry shared with any fusion
    banks attached later, so the optimizer and checkpoints see all of them.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, params: Optional[Parameters] = None):
        self.config = config
        self.params = params if params is not None else Parameters()
        rng = np.random.default_rng(seed)
        d, h, ff, eps = config.d_model, config.n_heads, config.d_ff, config.layer_norm_eps
        self.src_embed = self.params.create("src_embed", rng.normal(0.0, d ** -0.5, (config.src_vocab, d)))
        self.tgt_embed = self.params.create("tgt_embed", rng.normal(0.0, d ** -0.5, (config.tgt_vocab, d)))
        self.encoder_layers = [
            EncoderLayer(self.params, f"enc.{i}", d, h, ff, eps, rng) for i in range(config.enc_depth)
        ]
        self.decoder_layers = [
            DecoderLayer(self.params, f"dec.{i}", d, h, ff, eps, rng) for i in range(config.dec_depth)
        ]
        self.output = Linear(self.params, "out", d, config.tgt_vocab, rng)
        self.rng = np.random.default_rng([seed, 1])

    def reseed(self, seed: int):
        """Reset the dropout generator."""
        self.rng = np.random.default_rng([seed, 1])

    def embed(self, tokens, side: str = "source") -> Tensor:
        if side not in ("source", "target"):
            raise ValueError(f"side must be 'source' or 'target', got {side!r}")
        weight = self.src_embed if side == "source" else self.tgt_embed
        return embed_tokens(weight, np.asarray(tokens, dtype=np.int64), self.config.max_len)

    def _check_length(self, ids: np.ndarray):
        if ids.shape[1] < 1:
            raise SequenceLengthError("cannot run on an empty sequence")
        if ids.shape[1] > self.config.max_len:
            raise SequenceLengthError(f"sequence length {ids.shape[1]} exceeds max_len {self.config.max_len}")

    def encode(self, x, mask: Optional[np.ndarray] = None, training: bool = False,
               layer_hook: Optional[LayerHook] = None) -> EncoderState:
        ids = as_batch(x)
        self._check_length(ids)
        mask = (ids != PAD_ID) if mask is None else np.asarray(mask, dtype=bool)
        rate = self.config.dropout
        state = tc.dropout(self.embed(ids, "source"), rate, self.rng, training)
        if layer_hook is not None:
            state = layer_hook(0, state)
        layers, attentions = [state], []
        for n, layer in enumerate(self.encoder_layers, start=1):
            state, weights = layer(state, mask, rate, self.rng, training)
            if layer_hook is not None:
                state = layer_hook(n, state)
            layers.append(state)
            attentions.append(weights)
        return EncoderState(layers=layers, mask=mask, attentions=attentions)

    def decode(self, y_prefix, enc: EncoderState, training: bool = False,
               layer_hook: Optional[LayerHook] = None) -> Tuple[Tensor, DecoderState]:
        """Next-token logits for every prefix position."""
        ids = as_batch(y_prefix)
        self._check_length(ids)
        if not np.all(ids[:, 0] == BOS_ID):
            raise SequenceError("decoder prefix must start with the bos marker")
        if ids.shape[0] != enc.mask.shape[0]:
            raise ShapeError(f"batch size {ids.shape[0]} does not match encoder batch {enc.mask.shape[0]}")
        mask = ids != PAD_ID
        rate = self.config.dropout
        state = tc.dropout(self.embed(ids, "target"), rate, self.rng, training)
        if layer_hook is not None:
            state = layer_hook(0, state)
        decoded = DecoderState(layers=[state], self_outputs=[], cross_outputs=[], mask=mask)
        for n, layer in enumerate(self.decoder_layers, start=1):
            state, s, c, self_weights, cross_weights = layer(
                state, mask, enc.output, enc.mask, rate, self.rng, training)
            if layer_hook is not None:
                state = layer_hook(n, state)
            decoded.layers.append(state)
            decoded.self_outputs.append(s)
            decoded.cross_outputs.append(c)
            decoded.self_attentions.append(self_weights)
            decoded.cross_attentions.append(cross_weights)
        return self.output(state), decoded


def smoothed_targets(y_ref: np.ndarray, vocab: int, label_smoothing: float,
                     mask: np.ndarray, dtype) -> np.ndarray:
    """(1 - eps) one-hot + eps / V over the full vocabulary, zeroed at padding."""
    targets = np.full(y_ref.shape + (vocab,), label_smoothing / vocab, dtype=np.float64)
    np.put_along_axis(targets, y_ref[..., None], 1.0 - label_smoothing + label_smoothing / vocab, axis=-1)
    return (targets * mask[..., None]).astype(dtype)


def translation_loss(logits: Tensor, y_ref, label_smoothing: float = 0.0,
                     mask: Optional[np.ndarray] = None) -> Tensor:
    """Token-mean label-smoothed negative log-likelihood (minimised)."""
    y_ref = np.asarray(y_ref, dtype=np.int64)
    if logits.shape[:-1] != y_ref.shape:
        raise ShapeError(f"logits {logits.shape} and references {y_ref.shape} disagree in length")
    mask = (y_ref != PAD_ID) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise SequenceError("no target tokens to score")
    targets = smoothed_targets(y_ref, logits.shape[-1], label_smoothing, mask, logits.dtype)
    log_probs = tc.log_softmax(logits, axis=-1)
    return tc.scale(tc.sum_(tc.mul(log_probs, tc.constant_like(targets, log_probs))), -1.0 / count)

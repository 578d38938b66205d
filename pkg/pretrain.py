"""
Frozen teacher language models: pretraining and querying.

Two teacher kinds share one stack implementation:

- causal: masked self-attention LM trained on ``[bos] + z + [eos]`` to
  predict the next token (GPT-style);
- masked: bidirectional encoder trained on ``z + [eos]`` to reconstruct
  corrupted positions (BERT-style, masked-token objective only).

After pretraining a teacher is frozen: its parameters stop requiring
gradients, and every query runs under ``no_grad`` and returns detached
tensors.
"""

import math
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import special

import tensor_core as tc
from checkpoint import Checkpoint
from data import BOS_ID, EOS_ID, MASK_ID, NUM_RESERVED, PAD_ID, Vocabulary, pad_sequences
from errors import BudgetError, CheckpointError, EmptyCorpusError, FrozenTeacherError, VocabularyError
from optim import OptimizerState, adam_step, clip_by_global_norm
from tensor_core import Parameters, Tensor
from transformer_core import EncoderLayer, Linear, as_batch, embed_tokens, translation_loss


class TeacherKind(str, Enum):
    CAUSAL = "causal"
    MASKED = "masked"


class TeacherConfig(BaseModel):
    """Teacher architecture and pretraining budget."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    d_model: int = 64
    n_heads: int = 4
    depth: int = 2
    d_ff: int = 128
    vocab: int = 512
    max_len: int = 66
    dropout: float = 0.1
    layer_norm_eps: float = 1e-5
    language: str = "src"
    epochs: int = 3
    batch_size: int = 32
    warmup_steps: int = 400
    lr_scale: float = 1.0
    clip_norm: float = 5.0
    mask_rate: float = 0.15
    mask_token_prob: float = 0.8
    random_token_prob: float = 0.1
    valid_fraction: float = 0.05

    @model_validator(mode="after")
    def _check(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.depth < 1:
            raise ValueError("teacher depth must be >= 1")
        if self.language not in ("src", "tgt"):
            raise ValueError("language must be 'src' or 'tgt'")
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError("mask_rate must be in (0, 1)")
        if self.mask_token_prob < 0 or self.random_token_prob < 0 or self.mask_token_prob + self.random_token_prob > 1:
            raise ValueError("mask_token_prob + random_token_prob must be within [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        return self


class PretrainedModel:
    """
    Teacher stack theta_P: embedding, L self-attention layers and an LM head.

    ``forward_passes`` counts every stack evaluation so callers can verify
    how many teacher passes a query cost. The count is kept under a lock so
    it stays exact when several decoding threads share one teacher.
    """

    def __init__(self, kind: Union[TeacherKind, str], config: TeacherConfig, seed: int = 0,
                 vocab: Optional[Vocabulary] = None):
        self.kind = TeacherKind(kind)
        self.config = config
        self.vocab = vocab
        if vocab is not None and len(vocab) > config.vocab:
            raise VocabularyError(f"vocabulary of {len(vocab)} tokens does not fit teacher vocab {config.vocab}")
        self.params = Parameters()
        rng = np.random.default_rng(seed)
        d = config.d_model
        self.embed = self.params.create("embed", rng.normal(0.0, d ** -0.5, (config.vocab, d)))
        causal = self.kind is TeacherKind.CAUSAL
        self.layers = [
            EncoderLayer(self.params, f"stack.{l}", d, config.n_heads, config.d_ff,
                         config.layer_norm_eps, rng, causal=causal)
            for l in range(config.depth)
        ]
        self.lm_head = Linear(self.params, "lm_head", d, config.vocab, rng)
        self.rng = np.random.default_rng([seed, 2])
        self.forward_passes = 0
        self._pass_lock = threading.Lock()
        self.frozen = False
        self._fingerprint: Optional[str] = None

    @property
    def depth(self) -> int:
        return self.config.depth

    @property
    def d_model(self) -> int:
        return self.config.d_model

    @property
    def language(self) -> str:
        return self.config.language

    def forward(self, ids, training: bool = False) -> Tuple[List[Tensor], Tensor]:
        """Embedding plus every layer output (R^P_0 .. R^P_L) and the LM logits."""
        ids = as_batch(ids)
        if ids.shape[1] < 1:
            raise EmptyCorpusError("teacher input is empty")
        with self._pass_lock:
            self.forward_passes += 1
        mask = ids != PAD_ID
        rate = self.config.dropout
        state = tc.dropout(embed_tokens(self.embed, ids, self.config.max_len), rate, self.rng, training)
        layers = [state]
        for layer in self.layers:
            state, _ = layer(state, mask, rate, self.rng, training)
            layers.append(state)
        return layers, self.lm_head(state)

    def freeze(self):
        self.params.freeze()
        self.frozen = True
        self._fingerprint = self.params.checksum()

    def checksum(self) -> str:
        return self.params.checksum()

    @property
    def fingerprint(self) -> str:
        """Checksum recorded at freeze time (recomputed for unfrozen teachers)."""
        return self._fingerprint if self._fingerprint is not None else self.checksum()

    def verify_frozen(self):
        if self._fingerprint is not None and self.checksum() != self._fingerprint:
            raise FrozenTeacherError(f"{self.kind.value} {self.language} teacher parameters changed after freezing")

    # checkpoints ---------------------------------------------------------

    def to_checkpoint(self, metadata: Optional[dict] = None) -> Checkpoint:
        meta = {"teacher_kind": self.kind.value, "language": self.language}
        if self.vocab is not None:
            meta["vocab"] = self.vocab.to_list()
        meta.update(metadata or {})
        return Checkpoint(kind="teacher", config=self.config.model_dump(), tensors=self.params.state_dict(),
                          metadata=meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, freeze: bool = True) -> "PretrainedModel":
        if ckpt.kind != "teacher":
            raise CheckpointError(f"expected a teacher checkpoint, got kind {ckpt.kind!r}")
        config = TeacherConfig.model_validate(ckpt.config)
        vocab = Vocabulary.from_list(ckpt.metadata["vocab"]) if "vocab" in ckpt.metadata else None
        dtype = next(iter(ckpt.tensors.values())).dtype.name if ckpt.tensors else "float32"
        with tc.precision(dtype):
            model = cls(ckpt.metadata["teacher_kind"], config, vocab=vocab)
        model.params.load_state_dict(ckpt.tensors)
        if freeze:
            model.freeze()
        return model


def load_teacher(path) -> PretrainedModel:
    return PretrainedModel.from_checkpoint(Checkpoint.load(path))


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

class MaskPolicy(int, Enum):
    NONE = 0
    MASK = 1
    RANDOM = 2
    KEEP = 3


@dataclass
class MaskingPlan:
    """Which positions were selected and how each was corrupted."""

    positions: np.ndarray
    policy: np.ndarray
    corrupted: np.ndarray
    targets: np.ndarray

    @property
    def n_masked(self) -> int:
        return int(self.positions.sum())

    def fraction(self, maskable: np.ndarray) -> float:
        return self.n_masked / max(int(maskable.sum()), 1)


def maskable_positions(ids: np.ndarray) -> np.ndarray:
    return (ids != PAD_ID) & (ids != EOS_ID) & (ids != BOS_ID)


def sample_masking_plan(ids, rate: float, rng: np.random.Generator, vocab_size: int,
                        mask_token_prob: float = 0.8, random_token_prob: float = 0.1) -> MaskingPlan:
    """
    Select max(1, round(rate * n)) positions per sentence and corrupt them.

    Each selected position becomes the mask token with probability
    ``mask_token_prob``, a random non-reserved token with probability
    ``random_token_prob`` and is kept otherwise.
    """
    ids = as_batch(ids)
    if vocab_size <= NUM_RESERVED:
        raise VocabularyError("vocabulary has no non-reserved tokens to sample from")
    candidates = maskable_positions(ids)
    positions = np.zeros_like(candidates)
    for row in range(ids.shape[0]):
        cols = np.flatnonzero(candidates[row])
        if cols.size == 0:
            continue
        count = min(cols.size, max(1, int(round(rate * cols.size))))
        positions[row, rng.choice(cols, size=count, replace=False)] = True
    draws = rng.random(ids.shape)
    policy = np.full(ids.shape, MaskPolicy.NONE.value, dtype=np.int64)
    policy[positions & (draws < mask_token_prob)] = MaskPolicy.MASK.value
    policy[positions & (draws >= mask_token_prob) & (draws < mask_token_prob + random_token_prob)] = MaskPolicy.RANDOM.value
    policy[positions & (draws >= mask_token_prob + random_token_prob)] = MaskPolicy.KEEP.value
    corrupted = ids.copy()
    corrupted[policy == MaskPolicy.MASK.value] = MASK_ID
    random_slots = policy == MaskPolicy.RANDOM.value
    corrupted[random_slots] = rng.integers(NUM_RESERVED, vocab_size, size=int(random_slots.sum()))
    targets = np.where(positions, ids, PAD_ID)
    return MaskingPlan(positions=positions, policy=policy, corrupted=corrupted, targets=targets)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    model: PretrainedModel
    checkpoint: Checkpoint
    metrics: List[dict] = field(default_factory=list)


def causal_sequences(sentence: Sequence[int]) -> Tuple[List[int], List[int]]:
    """(input, output) for next-token training: [bos]+z -> z+[eos]."""
    return [BOS_ID] + list(sentence), list(sentence) + [EOS_ID]


def _split_corpus(corpus: Sequence[Sequence[int]], valid: Optional[Sequence[Sequence[int]]],
                  fraction: float, rng: np.random.Generator):
    corpus = [list(s) for s in corpus if len(s) > 0]
    if not corpus:
        raise EmptyCorpusError("monolingual corpus is empty")
    if valid is not None:
        return corpus, [list(s) for s in valid if len(s) > 0]
    order = rng.permutation(len(corpus))
    n_valid = int(round(fraction * len(corpus)))
    if n_valid == 0 or n_valid >= len(corpus):
        return corpus, corpus
    held = set(order[:n_valid].tolist())
    return [s for i, s in enumerate(corpus) if i not in held], [corpus[i] for i in sorted(held)]


def _length_batches(corpus: Sequence[Sequence[int]], batch_size: int, max_len: int,
                    rng: Optional[np.random.Generator]) -> List[List[int]]:
    kept = [i for i, s in enumerate(corpus) if len(s) + 2 <= max_len]
    dropped = len(corpus) - len(kept)
    if dropped:
        print(f"Warning: {dropped} sentences longer than teacher max_len={max_len} were skipped")
    kept.sort(key=lambda i: (len(corpus[i]), i))
    chunks = [kept[k:k + batch_size] for k in range(0, len(kept), batch_size)]
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return chunks


def _check_ids(corpus: Sequence[Sequence[int]], vocab_size: int):
    top = max((max(s) for s in corpus if len(s)), default=0)
    if top >= vocab_size:
        raise VocabularyError(f"token id {top} does not fit teacher vocabulary of size {vocab_size}")


def _causal_loss(model: PretrainedModel, sentences: Sequence[Sequence[int]], training: bool) -> Tuple[Tensor, int]:
    pairs = [causal_sequences(s) for s in sentences]
    inputs, _ = pad_sequences([p[0] for p in pairs])
    outputs, mask = pad_sequences([p[1] for p in pairs])
    _, logits = model.forward(inputs, training=training)
    return translation_loss(logits, outputs, 0.0, mask=mask), int(mask.sum())


def _masked_loss(model: PretrainedModel, sentences: Sequence[Sequence[int]], rng: np.random.Generator,
                 training: bool) -> Tuple[Tensor, MaskingPlan, Tensor]:
    ids, _ = pad_sequences([list(s) + [EOS_ID] for s in sentences])
    cfg = model.config
    plan = sample_masking_plan(ids, cfg.mask_rate, rng, cfg.vocab, cfg.mask_token_prob, cfg.random_token_prob)
    _, logits = model.forward(plan.corrupted, training=training)
    return translation_loss(logits, plan.targets, 0.0, mask=plan.positions), plan, logits


def evaluate_teacher(model: PretrainedModel, corpus: Sequence[Sequence[int]], batch_size: int = 64,
                     seed: int = 0) -> Dict[str, float]:
    """Held-out perplexity (and masked-token accuracy for masked teachers)."""
    rng = np.random.default_rng([seed, 3])
    total_nll = 0.0
    total_tokens = 0
    correct = 0
    with tc.no_grad():
        for chunk in _length_batches(corpus, batch_size, model.config.max_len, None):
            sentences = [corpus[i] for i in chunk]
            if model.kind is TeacherKind.CAUSAL:
                loss, count = _causal_loss(model, sentences, training=False)
            else:
                loss, plan, logits = _masked_loss(model, sentences, rng, training=False)
                count = plan.n_masked
                predicted = logits.data.argmax(axis=-1)
                correct += int(((predicted == plan.targets) & plan.positions).sum())
            total_nll += loss.item() * count
            total_tokens += count
    if total_tokens == 0:
        raise EmptyCorpusError("no held-out tokens to evaluate")
    mean_nll = total_nll / total_tokens
    metrics = {"valid_nll": mean_nll, "valid_ppl": math.exp(min(mean_nll, 700.0))}
    if model.kind is TeacherKind.MASKED:
        metrics["masked_accuracy"] = correct / total_tokens
    return metrics


def _pretrain(kind: TeacherKind, corpus: Sequence[Sequence[int]], config: TeacherConfig, seed: int,
              valid: Optional[Sequence[Sequence[int]]], vocab: Optional[Vocabulary], verbose: bool) -> PretrainResult:
    rng = np.random.default_rng(seed)
    train_set, valid_set = _split_corpus(corpus, valid, config.valid_fraction, rng)
    _check_ids(train_set + valid_set, config.vocab)
    model = PretrainedModel(kind, config, seed=seed, vocab=vocab)
    state = OptimizerState(d_model=config.d_model, warmup_steps=config.warmup_steps, scale=config.lr_scale)
    metrics: List[dict] = []

    if verbose:
        print("=" * 60)
        print(f"Pretraining {kind.value} teacher ({config.language}): {len(train_set)} sentences, "
              f"{model.params.count():,} parameters")
        print("=" * 60)

    for epoch in range(1, config.epochs + 1):
        epoch_loss = 0.0
        epoch_tokens = 0
        for chunk in _length_batches(train_set, config.batch_size, config.max_len, rng):
            sentences = [train_set[i] for i in chunk]
            model.params.zero_grad()
            if kind is TeacherKind.CAUSAL:
                loss, count = _causal_loss(model, sentences, training=True)
            else:
                loss, plan, _ = _masked_loss(model, sentences, rng, training=True)
                count = plan.n_masked
            tc.backward(loss)
            grads, _ = clip_by_global_norm(model.params.gradients(), config.clip_norm)
            adam_step(model.params, grads, state)
            epoch_loss += loss.item() * count
            epoch_tokens += count
        record = {"epoch": epoch, "train_loss": epoch_loss / max(epoch_tokens, 1)}
        record.update(evaluate_teacher(model, valid_set, seed=seed))
        metrics.append(record)
        if verbose:
            extra = f", masked acc {record['masked_accuracy']:.3f}" if "masked_accuracy" in record else ""
            print(f"  epoch {epoch}: train loss {record['train_loss']:.4f}, valid ppl {record['valid_ppl']:.3f}{extra}")

    model.params.zero_grad()
    model.freeze()
    checkpoint = model.to_checkpoint({"seed": seed, "metrics": metrics, "optimizer_steps": state.step})
    return PretrainResult(model=model, checkpoint=checkpoint, metrics=metrics)


def pretrain_causal(corpus: Sequence[Sequence[int]], config: TeacherConfig, seed: int = 0,
                    valid: Optional[Sequence[Sequence[int]]] = None, vocab: Optional[Vocabulary] = None,
                    verbose: bool = True) -> PretrainResult:
    """
    Train a causal LM teacher on a tokenised monolingual corpus.

    Parameters:
    -----------
    corpus : sequence of id lists
        Sentences without markers; ``[bos]`` / ``[eos]`` are added here
    config : TeacherConfig
        Architecture and budget
    seed : int
        Seeds initialisation, batch order and dropout
    valid : sequence of id lists, optional
        Held-out sentences; if None a ``valid_fraction`` split is carved out

    Returns:
    --------
    PretrainResult
        Frozen model, its checkpoint and per-epoch {epoch, train_loss, valid_nll, valid_ppl}
    """
    return _pretrain(TeacherKind.CAUSAL, corpus, config, seed, valid, vocab, verbose)


def pretrain_masked(corpus: Sequence[Sequence[int]], config: TeacherConfig, seed: int = 0,
                    valid: Optional[Sequence[Sequence[int]]] = None, vocab: Optional[Vocabulary] = None,
                    verbose: bool = True) -> PretrainResult:
    """Train a masked-token teacher; metrics add ``masked_accuracy``."""
    return _pretrain(TeacherKind.MASKED, corpus, config, seed, valid, vocab, verbose)


# ---------------------------------------------------------------------------
# querying
# ---------------------------------------------------------------------------

def _causal_view(ids: np.ndarray) -> Tuple[np.ndarray, int]:
    """Prefix bos when the sequence does not start with it; returns (input, offset)."""
    if np.all(ids[:, 0] == BOS_ID):
        return ids, 0
    return np.concatenate([np.full((ids.shape[0], 1), BOS_ID, dtype=ids.dtype), ids], axis=1), 1


def teacher_representations(model: PretrainedModel, tokens, cache=None) -> List[Tensor]:
    """
    R^P_1 .. R^P_L for a padded batch, aligned index-wise with ``tokens``.

    A causal teacher reads ``tokens`` with bos prefixed if it is missing, and
    the extra position is dropped again. Results are detached constants.
    """
    ids = as_batch(tokens)

    def compute():
        with tc.no_grad():
            if model.kind is TeacherKind.CAUSAL:
                inputs, offset = _causal_view(ids)
            else:
                inputs, offset = ids, 0
            layers, _ = model.forward(inputs)
            return [layer.data[:, offset:, :].copy() for layer in layers[1:]]

    arrays = cache.fetch(model.fingerprint, "representations", "-", ids, compute) if cache is not None else compute()
    return [Tensor(a, dtype=a.dtype) for a in arrays]


@dataclass
class TeacherDistribution:
    """Per-position teacher distributions plus how they were obtained."""

    probs: Tensor
    mode: str
    biased: bool
    passes: int


def teacher_distribution(model: PretrainedModel, y, mode: str = "exact", exact_cap: int = 64,
                         cache=None) -> TeacherDistribution:
    """
    Teacher distribution over the vocabulary for each position of ``y``.

    ``y`` is the sequence the student predicts (``y + [eos]``, padded).
    A causal teacher reads ``[bos] + y[:-1]`` in one pass. A masked teacher
    in exact mode runs one pass per position with that position masked; in
    fast mode it runs once without masking, so each position sees its own
    token and the result is flagged as biased.

    ``passes`` is the number of teacher passes this call actually ran, so it
    is 0 when the distribution came from ``cache``.
    """
    if mode not in ("exact", "fast"):
        raise ValueError(f"mode must be 'exact' or 'fast', got {mode!r}")
    ids = as_batch(y)
    batch, length = ids.shape
    causal = model.kind is TeacherKind.CAUSAL
    if not causal and mode == "exact" and length > exact_cap:
        raise BudgetError(f"exact masked-teacher distribution needs {length} passes, cap is {exact_cap}")

    def compute():
        with tc.no_grad():
            if causal:
                shifted = np.concatenate([np.full((batch, 1), BOS_ID, dtype=ids.dtype), ids[:, :-1]], axis=1)
                shifted[~(ids != PAD_ID)] = PAD_ID
                _, logits = model.forward(shifted)
                return special.softmax(logits.data.astype(np.float64), axis=-1), 1
            if mode == "fast":
                _, logits = model.forward(ids)
                return special.softmax(logits.data.astype(np.float64), axis=-1), 1
            probs = np.zeros((batch, length, model.config.vocab))
            for j in range(length):
                masked = ids.copy()
                masked[:, j] = np.where(ids[:, j] != PAD_ID, MASK_ID, PAD_ID)
                _, logits = model.forward(masked)
                probs[:, j, :] = special.softmax(logits.data[:, j, :].astype(np.float64), axis=-1)
            return probs, length

    key_mode = "causal" if causal else mode
    ran = []

    def counted():
        ran.append(True)
        return compute()

    if cache is not None:
        probs, passes = cache.fetch(model.fingerprint, "distribution", key_mode, ids, counted)
    else:
        probs, passes = counted()
    if not ran:
        passes = 0
    dtype = tc.get_default_dtype()
    return TeacherDistribution(probs=Tensor(probs, dtype=dtype), mode=key_mode,
                               biased=(not causal and mode == "fast"), passes=passes)


# ---------------------------------------------------------------------------
# teacher pool
# ---------------------------------------------------------------------------

class TeacherPool:
    """Frozen teachers keyed by (language, kind)."""

    def __init__(self, teachers: Sequence[PretrainedModel] = ()):
        self._teachers: Dict[Tuple[str, TeacherKind], PretrainedModel] = {}
        for teacher in teachers:
            self.add(teacher)

    def add(self, model: PretrainedModel) -> PretrainedModel:
        if not model.frozen:
            model.freeze()
        self._teachers[(model.language, model.kind)] = model
        return model

    def get(self, language: str, kind: Union[TeacherKind, str, None]) -> Optional[PretrainedModel]:
        if kind is None or kind == "none":
            return None
        return self._teachers.get((language, TeacherKind(kind)))

    def __contains__(self, key) -> bool:
        language, kind = key
        return self.get(language, kind) is not None

    def __iter__(self) -> Iterator[PretrainedModel]:
        return iter(self._teachers.values())

    def __len__(self) -> int:
        return len(self._teachers)

    def keys(self) -> List[Tuple[str, str]]:
        return [(lang, kind.value) for lang, kind in self._teachers]

    def checksums(self) -> Dict[str, str]:
        return {f"{lang}_{kind.value}": m.checksum() for (lang, kind), m in self._teachers.items()}

    def verify_frozen(self):
        for model in self._teachers.values():
            model.verify_frozen()

    @classmethod
    def from_paths(cls, paths: Dict[str, Optional[str]]) -> "TeacherPool":
        """Load teachers from a mapping such as {"src_masked": path, "tgt_causal": path}."""
        pool = cls()
        for key, path in paths.items():
            if not path:
                continue
            model = load_teacher(path)
            expected_lang, _, expected_kind = key.partition("_")
            if (model.language, model.kind.value) != (expected_lang, expected_kind):
                raise CheckpointError(f"checkpoint {path} holds a {model.language} {model.kind.value} teacher, "
                                      f"not {key}")
            pool.add(model)
        return pool

"""
Synthetic parallel/monolingual corpora, vocabularies, BPE and batching.

The synthetic task is a cipher+reorder translation problem: source sentences
come from a seeded Markov chain over word types, and the reference target is
``reorder(cipher(source))``. Target monolingual text is drawn from the same
generator pushed through the same mapping, so the target side has real
language-model structure for a causal teacher to learn.
"""

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError
from scipy import stats

from errors import ConfigError, EmptyCorpusError, SequenceError, SpecError, VocabularyError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
MASK_ID = 4
RESERVED_TOKENS = ["<pad>", "<s>", "</s>", "<unk>", "<mask>"]
NUM_RESERVED = len(RESERVED_TOKENS)

END_OF_WORD = "</w>"

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


# ---------------------------------------------------------------------------
# synthetic task
# ---------------------------------------------------------------------------

class SyntheticTaskSpec(BaseModel):
    """Description of a cipher+reorder translation task."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    vocab_size: int = 24
    markov_order: int = 1
    transition_seed: int = 7
    concentration: float = 0.3
    cipher: str = "random"
    reorder_window: int = 2
    min_len: int = 4
    max_len: int = 12
    n_parallel: int = 2000
    n_valid: int = 200
    n_test: int = 200
    n_src_mono: int = 50000
    n_tgt_mono: int = 50000
    seed: int = 0

    def check(self):
        """Raise SpecError for task descriptions no generator can honour."""
        if self.vocab_size < 8:
            raise SpecError(f"vocab_size must be >= 8, got {self.vocab_size}")
        if self.reorder_window < 1:
            raise SpecError(f"reorder_window must be >= 1, got {self.reorder_window}")
        if self.markov_order < 1:
            raise SpecError("markov_order must be >= 1")
        if self.cipher not in ("random", "identity"):
            raise SpecError(f"cipher must be 'random' or 'identity', got {self.cipher!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise SpecError(f"invalid length range [{self.min_len}, {self.max_len}]")
        if self.concentration <= 0:
            raise SpecError("concentration must be positive")
        if min(self.n_parallel, self.n_valid, self.n_test, self.n_src_mono, self.n_tgt_mono) < 0:
            raise SpecError("split sizes must be non-negative")


def word_spelling(index: int) -> str:
    """Deterministic pronounceable spelling for word type ``index``."""
    syllables = len(_CONSONANTS) * len(_VOWELS)
    parts = []
    value = index
    while True:
        c, v = divmod(value % syllables, len(_VOWELS))
        parts.append(_CONSONANTS[c] + _VOWELS[v])
        value //= syllables
        if value == 0:
            break
        value -= 1
    return "".join(reversed(parts))


def reorder(tokens: Sequence, window: int) -> list:
    """Reverse every consecutive block of ``window`` tokens (the last block may be short)."""
    out = []
    for start in range(0, len(tokens), window):
        out.extend(reversed(tokens[start:start + window]))
    return out


class MarkovChain:
    """
    Order-k Markov chain over ``vocab_size`` word types.

    The next-word distribution for each context is a Dirichlet draw seeded by
    (transition_seed, context), so it does not depend on the order in which
    contexts are visited.
    """

    def __init__(self, vocab_size: int, order: int, transition_seed: int, concentration: float):
        self.vocab_size = vocab_size
        self.order = order
        self.transition_seed = transition_seed
        self.concentration = concentration
        self._distributions: Dict[Tuple[int, ...], np.ndarray] = {}

    def distribution(self, context: Tuple[int, ...]) -> np.ndarray:
        """Next-word distribution; context entries of -1 mean sentence start."""
        context = tuple(context[-self.order:])
        if len(context) < self.order:
            context = (-1,) * (self.order - len(context)) + context
        if context not in self._distributions:
            rng = np.random.default_rng([self.transition_seed] + [c + 1 for c in context])
            self._distributions[context] = rng.dirichlet(np.full(self.vocab_size, self.concentration))
        return self._distributions[context]

    def sample(self, length: int, rng: np.random.Generator) -> List[int]:
        words: List[int] = []
        for _ in range(length):
            probs = self.distribution(tuple(words))
            words.append(int(rng.choice(self.vocab_size, p=probs)))
        return words

    def transition_matrix(self) -> np.ndarray:
        if self.order != 1:
            raise SpecError("transition_matrix is only defined for first-order chains")
        return np.stack([self.distribution((i,)) for i in range(self.vocab_size)])

    def entropy_rate(self) -> float:
        """Entropy rate in nats: sum_i pi_i H(P_i) under the stationary distribution pi."""
        matrix = self.transition_matrix()
        system = np.vstack([matrix.T - np.eye(self.vocab_size), np.ones((1, self.vocab_size))])
        target = np.zeros(self.vocab_size + 1)
        target[-1] = 1.0
        stationary, *_ = np.linalg.lstsq(system, target, rcond=None)
        stationary = np.clip(stationary, 0.0, None)
        stationary /= stationary.sum()
        return float(np.dot(stationary, stats.entropy(matrix, axis=1)))


@dataclass
class SyntheticCorpora:
    train_src: List[str]
    train_tgt: List[str]
    valid_src: List[str]
    valid_tgt: List[str]
    test_src: List[str]
    test_tgt: List[str]
    mono_src: List[str]
    mono_tgt: List[str]

    SPLITS = ("train", "valid", "test")

    def write(self, out_dir: Union[str, Path]) -> Dict[str, str]:
        """Write every split as ``<split>.src`` / ``<split>.tgt`` plus ``mono.src`` / ``mono.tgt``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = {}
        for split in self.SPLITS:
            for side in ("src", "tgt"):
                path = out_dir / f"{split}.{side}"
                write_corpus(path, getattr(self, f"{split}_{side}"))
                written[f"{split}.{side}"] = str(path)
        for side in ("src", "tgt"):
            path = out_dir / f"mono.{side}"
            write_corpus(path, getattr(self, f"mono_{side}"))
            written[f"mono.{side}"] = str(path)
        return written

    @classmethod
    def read(cls, corpus_dir: Union[str, Path]) -> "SyntheticCorpora":
        corpus_dir = Path(corpus_dir)
        fields = {}
        for split in cls.SPLITS + ("mono",):
            for side in ("src", "tgt"):
                path = corpus_dir / f"{split}.{side}"
                fields[f"{split}_{side}"] = read_corpus(path) if path.exists() else []
        return cls(**fields)


class SyntheticTask:
    """Generator plus exact oracle for one SyntheticTaskSpec."""

    def __init__(self, spec: SyntheticTaskSpec):
        spec.check()
        self.spec = spec
        self.chain = MarkovChain(spec.vocab_size, spec.markov_order, spec.transition_seed, spec.concentration)
        if spec.cipher == "identity":
            self.cipher = np.arange(spec.vocab_size)
        else:
            self.cipher = np.random.default_rng([spec.transition_seed, 99]).permutation(spec.vocab_size)
        self.words = [word_spelling(i) for i in range(spec.vocab_size)]
        self._index = {w: i for i, w in enumerate(self.words)}

    def sample_source(self, rng: np.random.Generator) -> List[int]:
        length = int(rng.integers(self.spec.min_len, self.spec.max_len + 1))
        return self.chain.sample(length, rng)

    def translate_ids(self, source: Sequence[int]) -> List[int]:
        return reorder([int(self.cipher[i]) for i in source], self.spec.reorder_window)

    def spell(self, ids: Sequence[int]) -> str:
        return " ".join(self.words[i] for i in ids)

    def oracle(self, sentence: str) -> str:
        """Exact reference translation of a source sentence."""
        try:
            ids = [self._index[w] for w in sentence.split()]
        except KeyError as exc:
            raise VocabularyError(f"word {exc.args[0]!r} is not part of this task") from exc
        return self.spell(self.translate_ids(ids))

    def generate(self) -> SyntheticCorpora:
        spec = self.spec
        rng = np.random.default_rng(spec.seed)
        needed = spec.n_parallel + spec.n_valid + spec.n_test
        seen = set()
        unique: List[Tuple[int, ...]] = []
        attempts = 0
        while len(unique) < needed:
            attempts += 1
            if attempts > 50 * needed + 1000:
                raise SpecError(f"could not draw {needed} distinct source sentences; widen the length range or vocabulary")
            sentence = tuple(self.sample_source(rng))
            if sentence not in seen:
                seen.add(sentence)
                unique.append(sentence)

        def split(lo: int, hi: int) -> Tuple[List[str], List[str]]:
            chunk = unique[lo:hi]
            return [self.spell(s) for s in chunk], [self.spell(self.translate_ids(s)) for s in chunk]

        train_src, train_tgt = split(0, spec.n_parallel)
        valid_src, valid_tgt = split(spec.n_parallel, spec.n_parallel + spec.n_valid)
        test_src, test_tgt = split(spec.n_parallel + spec.n_valid, needed)

        mono_rng = np.random.default_rng([spec.seed, 1])
        mono_src = [self.spell(self.sample_source(mono_rng)) for _ in range(spec.n_src_mono)]
        mono_tgt = [self.spell(self.translate_ids(self.sample_source(mono_rng))) for _ in range(spec.n_tgt_mono)]
        return SyntheticCorpora(train_src, train_tgt, valid_src, valid_tgt, test_src, test_tgt, mono_src, mono_tgt)


def generate_synthetic(spec: SyntheticTaskSpec) -> SyntheticCorpora:
    return SyntheticTask(spec).generate()


def load_task_spec(path: Union[str, Path]) -> SyntheticTaskSpec:
    try:
        with open(path, "r", encoding="utf-8") as f:
            spec = SyntheticTaskSpec.model_validate(json.load(f))
    except (ValidationError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid task spec {path}: {exc}") from exc
    spec.check()
    return spec


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------

def read_corpus(path: Union[str, Path]) -> List[str]:
    """One sentence per line, whitespace-normalised; blank lines are dropped."""
    with open(path, "r", encoding="utf-8") as f:
        return [" ".join(line.split()) for line in f if line.strip()]


def write_corpus(path: Union[str, Path], sentences: Iterable[str]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for sentence in sentences:
            f.write(sentence + "\n")


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

class Vocabulary:
    """Dense token <-> id map; ids 0..4 are always the reserved markers."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: List[str] = list(RESERVED_TOKENS)
        for token in tokens:
            if token in RESERVED_TOKENS:
                continue
            if token in self.itos:
                raise VocabularyError(f"duplicate token {token!r}")
            self.itos.append(token)
        self.stoi: Dict[str, int] = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, sentences: Iterable[Union[str, Sequence[str]]], max_size: Optional[int] = None) -> "Vocabulary":
        """Most frequent tokens first, ties in lexicographic order; ``max_size`` counts the reserved ids."""
        counts: Counter = Counter()
        for sentence in sentences:
            tokens = sentence.split() if isinstance(sentence, str) else sentence
            counts.update(t for t in tokens if t not in RESERVED_TOKENS)
        if not counts:
            raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if max_size is not None:
            if max_size <= NUM_RESERVED:
                raise VocabularyError(f"max_size must exceed the {NUM_RESERVED} reserved ids")
            ranked = ranked[: max_size - NUM_RESERVED]
        return cls([token for token, _ in ranked])

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> List[int]:
        ids = []
        for token in tokens:
            idx = self.stoi.get(token, UNK_ID)
            ids.append(UNK_ID if idx < NUM_RESERVED else idx)
        return ids

    def decode(self, ids: Sequence[int], strip_special: bool = True) -> List[str]:
        out = []
        for i in ids:
            i = int(i)
            if i < 0 or i >= len(self.itos):
                raise VocabularyError(f"id {i} out of range for vocabulary of size {len(self.itos)}")
            if strip_special and i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            out.append(self.itos[i])
        return out

    def to_list(self) -> List[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> "Vocabulary":
        if list(tokens[:NUM_RESERVED]) != RESERVED_TOKENS:
            raise VocabularyError("vocabulary does not start with the reserved tokens")
        return cls(tokens[NUM_RESERVED:])

    def save(self, path: Union[str, Path]):
        write_corpus(path, self.itos)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_list([line.rstrip("\n") for line in f if line.rstrip("\n")])


# ---------------------------------------------------------------------------
# byte pair encoding
# ---------------------------------------------------------------------------

@dataclass
class BpeModel:
    merges: List[Tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self.ranks = {pair: rank for rank, pair in enumerate(self.merges)}

    def save(self, path: Union[str, Path]):
        write_corpus(path, [f"{a} {b}" for a, b in self.merges])

    @classmethod
    def load(cls, path: Union[str, Path]) -> "BpeModel":
        merges = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != 2:
                    raise VocabularyError(f"malformed merge line: {line.rstrip()!r}")
                merges.append((parts[0], parts[1]))
        return cls(merges)


def _word_symbols(word: str) -> Tuple[str, ...]:
    chars = list(word)
    chars[-1] = chars[-1] + END_OF_WORD
    return tuple(chars)


def _merge_symbols(symbols: Tuple[str, ...], pair: Tuple[str, str]) -> Tuple[str, ...]:
    out = []
    i = 0
    while i < len(symbols):
        if i < len(symbols) - 1 and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(symbols[i] + symbols[i + 1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def learn_bpe(corpus: Iterable[str], merge_count: int) -> BpeModel:
    """
    Learn ``merge_count`` merges by repeatedly joining the most frequent
    adjacent symbol pair.

    Parameters:
    -----------
    corpus : iterable of str
        Whitespace-tokenised sentences
    merge_count : int
        Maximum number of merges; learning stops early when no pair remains

    Returns:
    --------
    BpeModel
        Ordered merge list; frequency ties go to the lexicographically smallest pair
    """
    word_counts = Counter(word for sentence in corpus for word in sentence.split())
    if not word_counts:
        raise EmptyCorpusError("cannot learn BPE from an empty corpus")
    words = {_word_symbols(w): c for w, c in word_counts.items()}
    merges: List[Tuple[str, str]] = []
    for _ in range(max(0, merge_count)):
        pairs: Counter = Counter()
        for symbols, count in words.items():
            for pair in zip(symbols, symbols[1:]):
                pairs[pair] += count
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        words = {_merge_symbols(s, best): c for s, c in words.items()}
    return BpeModel(merges)


def _segment_word(model: BpeModel, word: str) -> List[str]:
    symbols = _word_symbols(word)
    while len(symbols) > 1:
        candidates = [(model.ranks[p], p) for p in zip(symbols, symbols[1:]) if p in model.ranks]
        if not candidates:
            break
        symbols = _merge_symbols(symbols, min(candidates)[1])
    return list(symbols)


def apply_bpe(model: BpeModel, text: str) -> List[str]:
    return [piece for word in text.split() for piece in _segment_word(model, word)]


def decode_bpe(tokens: Sequence[str]) -> str:
    return " ".join("".join(tokens).replace(END_OF_WORD, " ").split())


@dataclass
class Tokenizer:
    """Vocabulary plus optional BPE: text <-> ids for one language."""

    vocab: Vocabulary
    bpe: Optional[BpeModel] = None

    def tokens(self, sentence: str) -> List[str]:
        return apply_bpe(self.bpe, sentence) if self.bpe is not None else sentence.split()

    def encode(self, sentence: str) -> List[int]:
        return self.vocab.encode(self.tokens(sentence))

    def decode(self, ids: Sequence[int]) -> str:
        tokens = self.vocab.decode(ids)
        return decode_bpe(tokens) if self.bpe is not None else " ".join(tokens)

    @classmethod
    def fit(cls, sentences: Sequence[str], merge_count: int = 0, max_size: Optional[int] = None) -> "Tokenizer":
        bpe = learn_bpe(sentences, merge_count) if merge_count > 0 else None
        segmented = [apply_bpe(bpe, s) if bpe is not None else s.split() for s in sentences]
        return cls(Vocabulary.build(segmented, max_size=max_size), bpe)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def pad_sequences(sequences: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence; returns (ids [B, T], mask [B, T] True on real tokens)."""
    width = max((len(s) for s in sequences), default=0)
    ids = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
    for row, seq in enumerate(sequences):
        ids[row, :len(seq)] = seq
    return ids, ids != PAD_ID


@dataclass
class Batch:
    """
    One padded training batch.

    ``src`` is z + [eos], ``tgt_in`` is [bos] + y and ``tgt_out`` is y + [eos];
    ``indices`` are positions in the corpus the batch was cut from.
    """

    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    indices: List[int]

    @property
    def src_mask(self) -> np.ndarray:
        return self.src != PAD_ID

    @property
    def tgt_mask(self) -> np.ndarray:
        return self.tgt_out != PAD_ID

    @property
    def size(self) -> int:
        return len(self.indices)

    @property
    def n_target_tokens(self) -> int:
        return int(self.tgt_mask.sum())

    def pad_fraction(self) -> float:
        total = self.src.size + self.tgt_out.size
        real = int(self.src_mask.sum()) + self.n_target_tokens
        return (total - real) / total if total else 0.0


@dataclass
class BatchPlan:
    batches: List[Batch]
    filtered: int = 0

    def __iter__(self):
        return iter(self.batches)

    def __len__(self) -> int:
        return len(self.batches)

    def pad_fraction(self) -> float:
        total = sum(b.src.size + b.tgt_out.size for b in self.batches)
        real = sum(int(b.src_mask.sum()) + b.n_target_tokens for b in self.batches)
        return (total - real) / total if total else 0.0


def make_batch(pairs: Sequence[Tuple[Sequence[int], Sequence[int]]], indices: Sequence[int]) -> Batch:
    src, _ = pad_sequences([list(pairs[i][0]) + [EOS_ID] for i in indices])
    tgt_in, _ = pad_sequences([[BOS_ID] + list(pairs[i][1]) for i in indices])
    tgt_out, _ = pad_sequences([list(pairs[i][1]) + [EOS_ID] for i in indices])
    return Batch(src=src, tgt_in=tgt_in, tgt_out=tgt_out, indices=list(indices))


def make_batches(pairs: Sequence[Tuple[Sequence[int], Sequence[int]]], batch_size: int, max_len: int,
                 rng: Optional[np.random.Generator] = None) -> BatchPlan:
    """
    Length-bucketed batches over id pairs.

    Examples whose source or target (with its marker) exceeds ``max_len`` are
    dropped and counted. Batches are cut from the length-sorted order; ``rng``
    only shuffles the order in which batches are emitted.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    kept = [i for i, (s, t) in enumerate(pairs) if len(s) + 1 <= max_len and len(t) + 1 <= max_len]
    filtered = len(pairs) - len(kept)
    if filtered:
        print(f"Warning: {filtered} examples longer than max_len={max_len} were filtered")
    kept.sort(key=lambda i: (len(pairs[i][0]), len(pairs[i][1]), i))
    chunks = [kept[k:k + batch_size] for k in range(0, len(kept), batch_size)]
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return BatchPlan([make_batch(pairs, chunk) for chunk in chunks], filtered=filtered)


def encode_pairs(src_sentences: Sequence[str], tgt_sentences: Sequence[str],
                 src_tok: Tokenizer, tgt_tok: Tokenizer) -> List[Tuple[List[int], List[int]]]:
    if len(src_sentences) != len(tgt_sentences):
        raise SequenceError(f"parallel corpus sides differ in length: {len(src_sentences)} vs {len(tgt_sentences)}")
    return [(src_tok.encode(s), tgt_tok.encode(t)) for s, t in zip(src_sentences, tgt_sentences)]

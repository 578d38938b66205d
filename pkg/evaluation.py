"""
Beam-search decoding and corpus-level BLEU-4.

Decoding talks to a scorer through two calls, ``start(source_ids)`` and
``next_log_probs(context, prefixes)``, so the same search runs over a plain
student, a fused student or a toy distribution in tests.
"""

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from data import BOS_ID, EOS_ID
from errors import DecodeError, EmptyCorpusError, SequenceError
from utils.paths import get_thread_count

MAX_ORDER = 4


class Scorer(Protocol):
    max_len: int

    def start(self, source: Sequence[int]): ...

    def next_log_probs(self, context, prefixes: Sequence[Sequence[int]]) -> np.ndarray: ...


@dataclass
class Hypothesis:
    """Generated tokens (bos excluded, eos included when finished) and their log-probability."""

    tokens: List[int]
    log_prob: float
    finished: bool = False

    @property
    def score(self) -> float:
        """Mean log-probability per generated token."""
        return self.log_prob / max(len(self.tokens), 1)

    @property
    def output_ids(self) -> List[int]:
        return self.tokens[:-1] if self.finished else list(self.tokens)

    def rank_key(self) -> Tuple[float, List[int]]:
        return (-self.score, self.tokens)


def _top_tokens(row: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, ties broken by the lower id."""
    order = np.lexsort((np.arange(row.size), -row))
    return order[:k]


def _generation_limit(scorer: Scorer, max_len: Optional[int]) -> int:
    limit = max_len if max_len is not None else scorer.max_len - 1
    if limit < 1:
        raise DecodeError(f"max_len must allow at least one generated token, got {limit}")
    return limit


def beam_search(scorer: Scorer, source: Sequence[int], beam_size: int = 4,
                max_len: Optional[int] = None) -> Hypothesis:
    """
    Standard beam search.

    Parameters:
    -----------
    scorer : Scorer
        Object implementing ``start`` / ``next_log_probs``
    source : sequence of int
        Source token ids without markers
    beam_size : int
        Number of live candidates kept per step
    max_len : int, optional
        Maximum generated tokens (eos included); defaults to the scorer's
        positional limit minus the bos slot. Reaching it ends every live
        candidate.

    Returns:
    --------
    Hypothesis
        Best candidate by mean log-probability per token; ties go to the
        lexicographically smaller token sequence
    """
    if beam_size < 1:
        raise DecodeError(f"beam_size must be >= 1, got {beam_size}")
    limit = _generation_limit(scorer, max_len)
    context = scorer.start(source)
    alive = [Hypothesis(tokens=[], log_prob=0.0)]
    finished: List[Hypothesis] = []
    for _ in range(limit):
        log_probs = scorer.next_log_probs(context, [[BOS_ID] + h.tokens for h in alive])
        candidates = []
        for hyp, row in zip(alive, log_probs):
            for token in _top_tokens(row, beam_size):
                token = int(token)
                candidates.append(Hypothesis(hyp.tokens + [token], hyp.log_prob + float(row[token]),
                                             finished=token == EOS_ID))
        candidates.sort(key=lambda h: (-h.log_prob, h.tokens))
        alive = []
        for cand in candidates[:beam_size]:
            (finished if cand.finished else alive).append(cand)
        if not alive:
            break
    pool = finished + alive
    return min(pool, key=Hypothesis.rank_key)


def greedy_decode(scorer: Scorer, source: Sequence[int], max_len: Optional[int] = None) -> Hypothesis:
    """Pick the most probable next token until eos or the length limit."""
    limit = _generation_limit(scorer, max_len)
    context = scorer.start(source)
    hyp = Hypothesis(tokens=[], log_prob=0.0)
    for _ in range(limit):
        row = scorer.next_log_probs(context, [[BOS_ID] + hyp.tokens])[0]
        token = int(_top_tokens(row, 1)[0])
        hyp = Hypothesis(hyp.tokens + [token], hyp.log_prob + float(row[token]), finished=token == EOS_ID)
        if hyp.finished:
            break
    return hyp


def translate_corpus(scorer: Scorer, sources: Sequence[Sequence[int]], beam_size: int = 4,
                     max_len: Optional[int] = None, threads: Optional[int] = None) -> List[Hypothesis]:
    """
    Decode every source sentence; runs over a thread pool when APT_THREADS > 1.

    Outputs do not depend on the thread count. Workers share the scorer, so
    teacher pass counts and cache statistics cover every worker, and a
    step's ``last_traces`` keeps the trace of whichever sentence finished last.
    """
    threads = threads if threads is not None else get_thread_count()

    def decode(source):
        if beam_size == 1:
            return greedy_decode(scorer, source, max_len)
        return beam_search(scorer, source, beam_size, max_len)

    if threads <= 1 or len(sources) < 2:
        return [decode(s) for s in sources]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(decode, sources))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _tokens(sentence: Union[str, Sequence[str]]) -> List[str]:
    return sentence.split() if isinstance(sentence, str) else list(sentence)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(hypothesis: Union[str, Sequence[str]], references: Sequence[Union[str, Sequence[str]]],
                       n: int) -> Tuple[int, int]:
    """Clipped n-gram matches and total hypothesis n-grams."""
    counts = ngrams(_tokens(hypothesis), n)
    max_counts: Counter = Counter()
    for reference in references:
        for gram, count in ngrams(_tokens(reference), n).items():
            max_counts[gram] = max(max_counts[gram], count)
    clipped = sum(min(count, max_counts[gram]) for gram, count in counts.items())
    return clipped, sum(counts.values())


@dataclass
class BleuDetails:
    bleu: float
    precisions: List[float] = field(default_factory=list)
    brevity_penalty: float = 0.0
    hyp_len: int = 0
    ref_len: int = 0
    matches: List[int] = field(default_factory=list)
    totals: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "precisions": self.precisions,
            "brevity_penalty": self.brevity_penalty,
            "hyp_len": self.hyp_len,
            "ref_len": self.ref_len,
            "matches": self.matches,
            "totals": self.totals,
        }


def bleu_details(hypotheses: Sequence[Union[str, Sequence[str]]],
                 references: Sequence[Union[str, Sequence[str]]]) -> BleuDetails:
    """
    Corpus BLEU-4, case-sensitive, unsmoothed, single reference per sentence.

    An order with no hypothesis n-grams at all (every hypothesis shorter than
    n) is vacuous and counts as precision 1.0, so a corpus scored against
    itself is always 100. An order that has n-grams but no matches still
    zeroes the score. An empty hypothesis side scores 0 through the brevity
    penalty.
    """
    if len(hypotheses) != len(references):
        raise SequenceError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    if not hypotheses:
        raise EmptyCorpusError("BLEU needs at least one sentence")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_tokens, ref_tokens = _tokens(hyp), _tokens(ref)
        hyp_len += len(hyp_tokens)
        ref_len += len(ref_tokens)
        for n in range(1, MAX_ORDER + 1):
            clipped, total = modified_precision(hyp_tokens, [ref_tokens], n)
            matches[n - 1] += clipped
            totals[n - 1] += total
    precisions = [m / t if t else 1.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        brevity_penalty = 0.0
    elif hyp_len > ref_len:
        brevity_penalty = 1.0
    else:
        brevity_penalty = math.exp(1.0 - ref_len / hyp_len)
    if min(precisions) == 0.0:
        score = 0.0
    else:
        score = 100.0 * brevity_penalty * math.exp(math.fsum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuDetails(bleu=score, precisions=precisions, brevity_penalty=brevity_penalty,
                       hyp_len=hyp_len, ref_len=ref_len, matches=matches, totals=totals)


def bleu(hypotheses: Sequence[Union[str, Sequence[str]]], references: Sequence[Union[str, Sequence[str]]]) -> float:
    return bleu_details(hypotheses, references).bleu


def token_accuracy(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> float:
    """Fraction of reference positions reproduced exactly (position-aligned)."""
    correct = total = 0
    for hyp, ref in zip(hypotheses, references):
        total += len(ref)
        correct += sum(1 for a, b in zip(hyp, ref) if a == b)
    return correct / total if total else 0.0

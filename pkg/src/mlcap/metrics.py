"""Corpus-level BLEU and a plain consensus (tf-idf cosine) caption score.

BLEU-n here is the corpus formulation: clipped k-gram matches and k-gram
totals are accumulated over the whole corpus before dividing, the geometric
mean runs over k = 1..n with uniform weights, and the brevity penalty
exp(1 - r/c) (capped at 1) uses the per-image reference length closest to
the candidate length, shorter on ties. Any zero precision zeroes the score;
there is no smoothing.

The consensus score averages, over images and over n-gram orders 1..4, the
cosine similarity between tf-idf vectors of the candidate and of each
reference. Term frequency is the raw within-sentence count; document
frequency counts the images whose reference set contains the n-gram, with
the denominator clamped to one. Scores live in [0, 1]; a candidate or
reference with an all-zero vector contributes zero for that order.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

NGRAM_ORDERS = (1, 2, 3, 4)


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class EvalItem:
    """One image: the candidate caption and its reference captions."""

    candidate: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not self.references:
            raise ValueError("every image needs at least one reference caption")


@dataclass(frozen=True)
class CorpusEval:
    """All evaluation items for one language (or pooled across languages)."""

    items: tuple[EvalItem, ...]
    language: str | None = None

    def __post_init__(self):
        if not self.items:
            raise ValueError("cannot evaluate an empty corpus")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[Sequence[str], Sequence[Sequence[str]]]], language=None):
        items = tuple(
            EvalItem(tuple(cand), tuple(tuple(r) for r in refs)) for cand, refs in pairs
        )
        return cls(items, language)


@dataclass(frozen=True)
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    cider: float
    images: int
    candidate_tokens: int

    def as_dict(self) -> dict:
        return {
            "bleu1": self.bleu1,
            "bleu2": self.bleu2,
            "bleu3": self.bleu3,
            "bleu4": self.bleu4,
            "cider": self.cider,
            "images": self.images,
            "candidate_tokens": self.candidate_tokens,
        }


def _closest_reference_length(item: EvalItem) -> int:
    c = len(item.candidate)
    return min((len(ref) for ref in item.references), key=lambda r: (abs(r - c), r))


def bleu_n(corpus: CorpusEval, n: int) -> float:
    """Corpus BLEU with uniform k-gram weights for k = 1..n."""
    if not 1 <= n <= 4:
        raise ValueError(f"bleu_n: order must be in 1..4, got {n}")
    c = sum(len(item.candidate) for item in corpus.items)
    r = sum(_closest_reference_length(item) for item in corpus.items)
    if c == 0:
        return 0.0
    log_precision_sum = 0.0
    for k in range(1, n + 1):
        matched = 0
        total = 0
        for item in corpus.items:
            cand = ngram_counts(item.candidate, k)
            if not cand:
                continue
            ceiling: Counter = Counter()
            for ref in item.references:
                for gram, cnt in ngram_counts(ref, k).items():
                    if cnt > ceiling[gram]:
                        ceiling[gram] = cnt
            matched += sum(min(cnt, ceiling[gram]) for gram, cnt in cand.items())
            total += sum(cand.values())
        if matched == 0 or total == 0:
            return 0.0
        log_precision_sum += math.log(matched / total)
    brevity = 1.0 if c >= r else math.exp(1.0 - r / c)
    return brevity * math.exp(log_precision_sum / n)


def _tfidf(counts: Counter, idf: dict) -> dict:
    return {gram: cnt * idf.get(gram, idf["__unseen__"]) for gram, cnt in counts.items()}


def _cosine(u: dict, v: dict) -> float:
    norm_u = math.sqrt(math.fsum(x * x for x in u.values()))
    norm_v = math.sqrt(math.fsum(x * x for x in v.values()))
    if norm_u == 0.0 or norm_v == 0.0:
        return 0.0
    dot = math.fsum(u[g] * v[g] for g in u if g in v)
    return dot / (norm_u * norm_v)


def cider(corpus: CorpusEval) -> float:
    """Mean over images and n-gram orders of the tf-idf cosine to each ref."""
    m = len(corpus.items)
    idf_by_order = []
    for n in NGRAM_ORDERS:
        doc_freq: Counter = Counter()
        for item in corpus.items:
            seen = set()
            for ref in item.references:
                seen.update(ngram_counts(ref, n))
            doc_freq.update(seen)
        idf = {gram: math.log(m / max(1, df)) for gram, df in doc_freq.items()}
        idf["__unseen__"] = math.log(m / 1)
        idf_by_order.append(idf)
    image_scores = []
    for item in corpus.items:
        order_scores = []
        for n, idf in zip(NGRAM_ORDERS, idf_by_order):
            cand_vec = _tfidf(ngram_counts(item.candidate, n), idf)
            sims = [_cosine(cand_vec, _tfidf(ngram_counts(ref, n), idf)) for ref in item.references]
            order_scores.append(math.fsum(sims) / len(sims))
        image_scores.append(math.fsum(order_scores) / len(NGRAM_ORDERS))
    return math.fsum(image_scores) / m


def evaluate_corpus(corpus: CorpusEval) -> MetricReport:
    """BLEU-1..4 and the consensus score in one pass."""
    return MetricReport(
        bleu1=bleu_n(corpus, 1),
        bleu2=bleu_n(corpus, 2),
        bleu3=bleu_n(corpus, 3),
        bleu4=bleu_n(corpus, 4),
        cider=cider(corpus),
        images=len(corpus.items),
        candidate_tokens=sum(len(item.candidate) for item in corpus.items),
    )

"""Beam-search decoding, plus an exhaustive decoder for small spaces.

A hypothesis scores the sum of per-token log-probabilities of everything it
has emitted. The emitted length is capped at ``max_len`` counting every
token including a terminal eos; a hypothesis also finishes the moment it
emits eos. Padding and language-start ids are never emitted (unk and eos
are). Ties are broken everywhere by the same rule: higher logprob first,
then lexicographically smaller id tuple, which also puts a finished prefix
ahead of its extensions. Scores are never length-normalized unless the
optional ranking flag asks for it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import LstmState, ModelParams, step_distribution, zero_state
from .vocab import EOS_ID, PAD_ID

EXHAUSTIVE_LIMIT = 1_000_000


@dataclass(frozen=True)
class BeamConfig:
    """Decode settings; ``exclude_ids`` lists ids barred from emission."""

    width: int = 5
    max_len: int = 30
    language: str | None = None
    exclude_ids: tuple[int, ...] = (PAD_ID,)
    length_norm: bool = False

    def __post_init__(self):
        if self.width < 1:
            raise ValueError(f"beam width must be >= 1, got {self.width}")
        if self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")
        if EOS_ID in self.exclude_ids:
            raise ValueError("the eos id cannot be excluded from emission")


@dataclass
class Hypothesis:
    """A partial or finished decode: emitted ids and their total logprob.

    ``state`` is the decoder state after consuming the feature, the start
    token, and every emitted id; ``next_logp`` caches the distribution over
    the next id. Both are dropped once the hypothesis finishes.
    """

    ids: tuple[int, ...]
    logprob: float
    state: LstmState | None
    next_logp: np.ndarray | None
    finished: bool = False


def _sort_key(logprob: float, ids: tuple[int, ...]):
    return (-logprob, ids)


def _rank_key(h: Hypothesis, length_norm: bool):
    score = h.logprob / len(h.ids) if length_norm else h.logprob
    return (-score, h.ids)


def _emittable_ids(vocab_size: int, exclude_ids) -> list[int]:
    banned = set(int(i) for i in exclude_ids)
    if EOS_ID in banned:
        raise ValueError("the eos id cannot be excluded from emission")
    ids = [t for t in range(vocab_size) if t not in banned]
    if not ids:
        raise ValueError("every token id is excluded from emission")
    return ids


def _root(feature, start_id: int, params: ModelParams) -> Hypothesis:
    state, _ = step_distribution(zero_state(params), np.asarray(feature, dtype=np.float64), params)
    state, logp = step_distribution(state, int(start_id), params)
    return Hypothesis(ids=(), logprob=0.0, state=state, next_logp=logp.data)


def beam_search(feature, start_id: int, params: ModelParams, config: BeamConfig) -> list[tuple[list[int], float]]:
    """Top ``config.width`` decodes as (ids, logprob), best first.

    Every live hypothesis is scored against the full vocabulary each step;
    the global top ``width`` candidates survive. Hypotheses that emit eos or
    reach ``max_len`` emitted tokens move to the finished pool, which only
    competes at the final ranking.
    """
    emittable = _emittable_ids(params.dims.vocab, config.exclude_ids)
    live = [_root(feature, start_id, params)]
    finished: list[Hypothesis] = []
    while live:
        candidates = []
        for hyp in live:
            for tok in emittable:
                candidates.append((hyp.logprob + float(hyp.next_logp[tok]), hyp, tok))
        candidates.sort(key=lambda c: _sort_key(c[0], c[1].ids + (c[2],)))
        live = []
        for logprob, hyp, tok in candidates[: config.width]:
            ids = hyp.ids + (tok,)
            if tok == EOS_ID or len(ids) >= config.max_len:
                finished.append(Hypothesis(ids, logprob, None, None, finished=True))
            else:
                state, logp = step_distribution(hyp.state, tok, params)
                live.append(Hypothesis(ids, logprob, state, logp.data))
    finished.sort(key=lambda h: _rank_key(h, config.length_norm))
    return [(list(h.ids), h.logprob) for h in finished[: config.width]]


def exhaustive_decode(
    feature, start_id: int, params: ModelParams, max_len: int, exclude_ids=(PAD_ID,)
) -> tuple[list[int], float]:
    """The exact argmax sequence by full enumeration, same tie rule.

    Enumerates every emittable sequence that either ends with eos or runs
    to ``max_len`` tokens. Refuses vocabularies where the enumeration would
    exceed a million sequences.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    if params.dims.vocab**max_len > EXHAUSTIVE_LIMIT:
        raise ValueError(
            f"search space {params.dims.vocab}^{max_len} exceeds {EXHAUSTIVE_LIMIT} sequences"
        )
    emittable = _emittable_ids(params.dims.vocab, exclude_ids)
    root = _root(feature, start_id, params)
    best_ids: tuple[int, ...] | None = None
    best_logprob = -np.inf
    stack = [root]
    while stack:
        hyp = stack.pop()
        for tok in emittable:
            logprob = hyp.logprob + float(hyp.next_logp[tok])
            ids = hyp.ids + (tok,)
            if tok == EOS_ID or len(ids) >= max_len:
                if best_ids is None or _sort_key(logprob, ids) < _sort_key(best_logprob, best_ids):
                    best_ids, best_logprob = ids, logprob
            else:
                state, logp = step_distribution(hyp.state, tok, params)
                stack.append(Hypothesis(ids, logprob, state, logp.data))
    assert best_ids is not None
    return list(best_ids), best_logprob

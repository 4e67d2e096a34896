"""Training: batched NLL over caption tokens, Adam, CIDEr model selection.

Each (image, caption, language) pair is an independent training example;
languages mix freely inside a batch, distinguished only by their start
token. A batch pads captions to the longest one and masks the padding out
of the loss, which averages over unmasked target positions by default (an
optional mode keeps the raw sum). Every epoch reshuffles with its own rng
stream, decodes the validation images greedily, and scores them with the
consensus metric; the checkpoint kept is the epoch whose unweighted mean
across languages is highest, earliest on ties.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .beam import BeamConfig, beam_search
from .data import DatasetSplit, ImageRecord, corpus_from_records
from .metrics import CorpusEval, cider
from .model import (
    Dims,
    LstmState,
    ModelParams,
    advance_state,
    init_params,
    output_logits,
    project_feature,
    embed_tokens,
)
from .rng import substream
from .vocab import PAD_ID, Vocabulary, build_vocab

CLIP_NORM = 5.0
LOSS_MODES = ("mean", "sum")


@dataclass(frozen=True)
class TrainConfig:
    """Run settings; defaults follow the reference captioning protocol."""

    epochs: int = 40
    batch_size: int = 128
    hidden: int = 512
    embed: int = 512
    beam: int = 5
    val_beam: int = 1
    max_len: int = 30
    seed: int = 42
    min_count: int = 5
    languages: tuple[str, ...] | None = None
    loss_mode: str = "mean"
    clip: bool = False
    lowercase: bool = False
    feature_l2norm: bool = False

    def __post_init__(self):
        positive = ("epochs", "batch_size", "hidden", "embed", "beam", "val_beam", "max_len", "min_count")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"config.{name} must be >= 1, got {getattr(self, name)}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"config.loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.languages is not None and len(set(self.languages)) != len(self.languages):
            raise ValueError(f"config.languages has duplicates: {self.languages}")

    def as_dict(self) -> dict:
        d = {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "hidden": self.hidden,
            "embed": self.embed,
            "beam": self.beam,
            "val_beam": self.val_beam,
            "max_len": self.max_len,
            "seed": self.seed,
            "min_count": self.min_count,
            "languages": None if self.languages is None else list(self.languages),
            "loss_mode": self.loss_mode,
            "clip": self.clip,
            "lowercase": self.lowercase,
            "feature_l2norm": self.feature_l2norm,
        }
        return d


@dataclass(frozen=True)
class Example:
    """One training pair: a feature, a start id, and target ids ending in eos."""

    feature: np.ndarray
    start_id: int
    target_ids: tuple[int, ...]


@dataclass
class Batch:
    """Row-stacked examples padded to a common length with a loss mask."""

    features: np.ndarray   # [B, D] float64
    start_ids: np.ndarray  # [B] int64
    targets: np.ndarray    # [B, T] int64, padded with pad_id
    mask: np.ndarray       # [B, T] float64, 1 on real target positions

    @property
    def token_count(self) -> int:
        return int(round(self.mask.sum()))


def examples_from_records(records: Iterable[ImageRecord], vocab: Vocabulary, languages: Sequence[str]) -> list[Example]:
    keep = set(languages)
    examples = []
    for rec in records:
        for cap in rec.captions:
            if cap.language in keep:
                seq = vocab.encode(cap.tokens, cap.language)
                examples.append(Example(rec.feature, vocab.start_id(cap.language), seq.ids))
    return examples


def make_batch(examples: Sequence[Example]) -> Batch:
    if not examples:
        raise ValueError("cannot build an empty batch")
    longest = max(len(ex.target_ids) for ex in examples)
    features = np.stack([ex.feature for ex in examples]).astype(np.float64)
    start_ids = np.array([ex.start_id for ex in examples], dtype=np.int64)
    targets = np.full((len(examples), longest), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(examples), longest))
    for row, ex in enumerate(examples):
        targets[row, : len(ex.target_ids)] = ex.target_ids
        mask[row, : len(ex.target_ids)] = 1.0
    return Batch(features, start_ids, targets, mask)


def sequence_loss(batch: Batch, params: ModelParams, mode: str = "mean") -> Tensor:
    """Teacher-forced NLL of all unmasked target positions in one graph.

    The image feature is the first input step (its output distribution is
    not scored), the start token the second; thereafter each target token
    is also the next input. Padding rows advance the state but their
    positions are masked out of the loss.
    """
    if mode not in LOSS_MODES:
        raise ValueError(f"loss mode must be one of {LOSS_MODES}, got {mode!r}")
    token_count = batch.token_count
    if token_count == 0:
        raise ValueError("sequence_loss: batch mask selects no target positions")
    batch_size, steps = batch.targets.shape
    hidden = params.dims.hidden
    state = LstmState(
        Tensor(np.zeros((batch_size, hidden))), Tensor(np.zeros((batch_size, hidden)))
    )
    state = advance_state(project_feature(Tensor(batch.features), params), state, params)
    x = embed_tokens(params, batch.start_ids)
    state = advance_state(x, state, params)
    total: Tensor | None = None
    for t in range(steps):
        ce = ad.cross_entropy_rows(output_logits(state, params), batch.targets[:, t])
        masked = ad.hadamard(ce, Tensor(batch.mask[:, t]))
        step_sum = ad.sum_all(masked)
        total = step_sum if total is None else ad.add(total, step_sum)
        if t + 1 < steps:
            state = advance_state(embed_tokens(params, batch.targets[:, t]), state, params)
    assert total is not None
    if mode == "mean":
        total = ad.scale(total, 1.0 / token_count)
    return total


@dataclass
class AdamState:
    """First/second moment accumulators per parameter plus the step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams, **hyper) -> "AdamState":
        m = {name: np.zeros_like(p.data) for name, p in params.named_parameters()}
        v = {name: np.zeros_like(p.data) for name, p in params.named_parameters()}
        return cls(m=m, v=v, **hyper)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place.

    theta <- theta - alpha * m_hat / (sqrt(v_hat) + eps), with the epsilon
    outside the square root.
    """
    for name, p in params.named_parameters():
        if name not in grads:
            raise ValueError(f"adam_step: missing gradient for {name!r}")
        if grads[name].shape != p.data.shape:
            raise DimensionError(
                f"adam_step: gradient shape {grads[name].shape} != parameter shape {p.data.shape} for {name!r}"
            )
    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name, p in params.named_parameters():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        p.data -= state.alpha * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = CLIP_NORM) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(math.fsum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def collect_gradients(params: ModelParams) -> dict[str, np.ndarray]:
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.named_parameters()
    }


def train_epoch(
    examples: Sequence[Example],
    params: ModelParams,
    adam: AdamState,
    config: TrainConfig,
    rng: np.random.Generator,
) -> float:
    """One shuffled pass; returns the token-weighted mean NLL per token."""
    if not examples:
        raise ValueError("train_epoch: no training examples")
    order = rng.permutation(len(examples))
    nll_sum = 0.0
    token_sum = 0
    for lo in range(0, len(order), config.batch_size):
        batch = make_batch([examples[i] for i in order[lo : lo + config.batch_size]])
        params.zero_grads()
        loss = sequence_loss(batch, params, config.loss_mode)
        ad.backward(loss)
        grads = collect_gradients(params)
        if config.clip:
            clip_gradients(grads)
        adam_step(params, grads, adam)
        n = batch.token_count
        nll_sum += float(loss.data) * (n if config.loss_mode == "mean" else 1.0)
        token_sum += n
    return nll_sum / token_sum


def select_best_epoch(history: Sequence[float]) -> int:
    """Index of the highest validation score, earliest on exact ties."""
    if not history:
        raise ValueError("select_best_epoch: empty history")
    best = 0
    for i, score in enumerate(history):
        if score > history[best]:
            best = i
    return best


def generate_caption(
    params: ModelParams,
    vocab: Vocabulary,
    feature: np.ndarray,
    language: str,
    width: int = 5,
    max_len: int = 30,
    length_norm: bool = False,
) -> list[str]:
    """Beam-decode one image in one language, back to surface tokens."""
    config = BeamConfig(
        width=width,
        max_len=max_len,
        language=language,
        exclude_ids=(PAD_ID,) + vocab.start_ids,
        length_norm=length_norm,
    )
    ids, _ = beam_search(feature, vocab.start_id(language), params, config)[0]
    return vocab.decode(ids)


def validation_score(
    params: ModelParams,
    vocab: Vocabulary,
    records: Sequence[ImageRecord],
    languages: Sequence[str],
    width: int,
    max_len: int,
) -> float:
    """Unweighted mean over languages of the consensus score on decodes."""
    per_language = []
    for lang in languages:
        pairs = []
        for rec in records:
            refs = [c.tokens for c in rec.captions if c.language == lang]
            if not refs:
                continue
            cand = generate_caption(params, vocab, rec.feature, lang, width, max_len)
            pairs.append((cand, refs))
        if pairs:
            per_language.append(cider(CorpusEval.from_pairs(pairs, lang)))
    if not per_language:
        return 0.0
    return math.fsum(per_language) / len(per_language)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_score: float
    seconds: float


@dataclass
class TrainResult:
    params: ModelParams
    vocab: Vocabulary
    dims: Dims
    config: TrainConfig
    history: list[EpochStats]
    best_epoch: int

    @property
    def val_scores(self) -> list[float]:
        return [s.val_score for s in self.history]


def run_training(
    split: DatasetSplit,
    config: TrainConfig,
    *,
    log: Callable[[str], None] | None = None,
    save_epoch: Callable[[ModelParams, Vocabulary, int], None] | None = None,
) -> TrainResult:
    """The full protocol: build vocab, init, train, select the best epoch.

    Emits one tab-separated line per epoch (index, mean train loss,
    validation score, wall seconds) through ``log``. ``save_epoch`` is
    called with the parameters and vocabulary after every epoch; the
    returned parameters are a copy of the best epoch, not the last.
    """
    if not split.train:
        raise ValueError("run_training: empty training split")
    languages = (
        list(config.languages)
        if config.languages is not None
        else sorted({c.language for r in split.train for c in r.captions})
    )
    if not languages:
        raise ValueError("run_training: no languages found in the training split")
    corpus = corpus_from_records(split.train, languages)
    vocab = build_vocab(corpus, config.min_count)
    feature_dim = int(split.train[0].feature.size)
    dims = Dims(len(vocab), config.embed, config.hidden, feature_dim)
    params = init_params(dims, substream(config.seed, "init"))
    adam = AdamState.for_params(params)
    shuffle_rng = substream(config.seed, "shuffle")
    examples = examples_from_records(split.train, vocab, languages)
    if not examples:
        raise ValueError(f"run_training: no captions in languages {languages}")
    history: list[EpochStats] = []
    best_arrays: dict[str, np.ndarray] | None = None
    best_score = -np.inf
    for epoch in range(config.epochs):
        started = time.perf_counter()
        train_loss = train_epoch(examples, params, adam, config, shuffle_rng)
        val_score = validation_score(params, vocab, split.val, languages, config.val_beam, config.max_len)
        seconds = time.perf_counter() - started
        history.append(EpochStats(epoch, train_loss, val_score, seconds))
        if log is not None:
            log(f"{epoch}\t{train_loss:.6f}\t{val_score:.6f}\t{seconds:.3f}")
        if save_epoch is not None:
            save_epoch(params, vocab, epoch)
        if val_score > best_score:
            best_score = val_score
            best_arrays = {name: p.data.copy() for name, p in params.named_parameters()}
    best_epoch = select_best_epoch([s.val_score for s in history])
    assert best_arrays is not None
    best_params = ModelParams(
        dims, **{name: Tensor(best_arrays[name], requires_grad=True) for name in best_arrays}
    )
    return TrainResult(best_params, vocab, dims, config, history, best_epoch)

"""Single-layer LSTM caption decoder conditioned on an image feature.

The image feature is injected once, as the first input step (projected into
embedding space); the language start token is the second input; the caption
tokens follow under teacher forcing. The distribution produced by the image
step is never scored, and the start token is never a prediction target: a
caption of N ids (terminal eos included) yields exactly N scored steps.
Gate order inside the packed pre-activation block is input, forget, output,
candidate, with the forget-gate bias slice initialized to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vocab import TokenSequence

PARAM_ORDER = ("w_embed", "w_image", "b_image", "w_x", "w_h", "b_gates", "w_out", "b_out")

INIT_SCALE = 0.08


@dataclass(frozen=True)
class Dims:
    """Model dimensions: vocabulary, embedding, hidden state, image feature."""

    vocab: int
    embed: int
    hidden: int
    feature: int

    def __post_init__(self):
        for name in ("vocab", "embed", "hidden", "feature"):
            if getattr(self, name) < 1:
                raise ValueError(f"dims.{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class LstmState:
    """Hidden and cell activations; rows for a batch, vectors for one beam."""

    h: Tensor
    c: Tensor


@dataclass
class ModelParams:
    """All trainable tensors, in the fixed order used for Adam and storage."""

    dims: Dims
    w_embed: Tensor  # [V, E] token embedding rows
    w_image: Tensor  # [D, E] image feature projection
    b_image: Tensor  # [E]
    w_x: Tensor      # [E, 4H] input weights, gates packed i|f|o|g
    w_h: Tensor      # [H, 4H] recurrent weights
    b_gates: Tensor  # [4H]
    w_out: Tensor    # [H, V] output projection
    b_out: Tensor    # [V]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(name, getattr(self, name)) for name in PARAM_ORDER]

    def zero_grads(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()


def init_params(dims: Dims, seed) -> ModelParams:
    """Fresh parameters: uniform(-0.08, 0.08) weights drawn in declared
    order, zero biases except the forget-gate block, which starts at one."""
    rng = np.random.default_rng(seed)
    v, e, h, d = dims.vocab, dims.embed, dims.hidden, dims.feature

    def uniform(*shape):
        return ad.parameter(rng.uniform(-INIT_SCALE, INIT_SCALE, shape))

    w_embed = uniform(v, e)
    w_image = uniform(d, e)
    b_image = ad.parameter(np.zeros(e))
    w_x = uniform(e, 4 * h)
    w_h = uniform(h, 4 * h)
    b = np.zeros(4 * h)
    b[h : 2 * h] = 1.0
    b_gates = ad.parameter(b)
    w_out = uniform(h, v)
    b_out = ad.parameter(np.zeros(v))
    return ModelParams(dims, w_embed, w_image, b_image, w_x, w_h, b_gates, w_out, b_out)


def zero_state(params: ModelParams, batch: int | None = None) -> LstmState:
    """All-zero start state; vector form when ``batch`` is None."""
    shape = (params.dims.hidden,) if batch is None else (batch, params.dims.hidden)
    return LstmState(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


def advance_state(x: Tensor, state: LstmState, params: ModelParams) -> LstmState:
    """One recurrence step on row inputs: x [B,E], state [B,H] -> [B,H]."""
    z = ad.add_bias(ad.add(ad.matmul(x, params.w_x), ad.matmul(state.h, params.w_h)), params.b_gates)
    hh = params.dims.hidden
    i = ad.sigmoid(ad.slice_last(z, 0, hh))
    f = ad.sigmoid(ad.slice_last(z, hh, 2 * hh))
    o = ad.sigmoid(ad.slice_last(z, 2 * hh, 3 * hh))
    g = ad.tanh(ad.slice_last(z, 3 * hh, 4 * hh))
    c = ad.add(ad.hadamard(f, state.c), ad.hadamard(i, g))
    h = ad.hadamard(o, ad.tanh(c))
    return LstmState(h, c)


def output_logits(state: LstmState, params: ModelParams) -> Tensor:
    return ad.add_bias(ad.matmul(state.h, params.w_out), params.b_out)


def project_feature(feature: Tensor, params: ModelParams) -> Tensor:
    """Image feature rows [B,D] into embedding space [B,E]."""
    return ad.add_bias(ad.matmul(feature, params.w_image), params.b_image)


def embed_tokens(params: ModelParams, ids) -> Tensor:
    """Embedding rows [B,E] for a vector of token ids."""
    return ad.take_rows(params.w_embed, np.asarray(ids, dtype=np.int64))


def _as_row(x: Tensor) -> Tensor:
    return ad.reshape(x, (1, x.shape[0]))


def _as_vector(x: Tensor) -> Tensor:
    return ad.reshape(x, (x.shape[-1],))


def lstm_step(x: Tensor, state: LstmState, params: ModelParams) -> tuple[LstmState, Tensor]:
    """One step plus output logits; accepts vector or row-batch inputs."""
    if x.data.ndim == 1:
        row_state = LstmState(_as_row(state.h), _as_row(state.c))
        new = advance_state(_as_row(x), row_state, params)
        logits = output_logits(new, params)
        return LstmState(_as_vector(new.h), _as_vector(new.c)), _as_vector(logits)
    new = advance_state(x, state, params)
    return new, output_logits(new, params)


@dataclass
class ForwardTrace:
    """Teacher-forced pass record: one probability row per scored target."""

    distributions: list[np.ndarray]
    final_state: LstmState
    sequence: TokenSequence
    start_id: int


def forward_sequence(feature, sequence: TokenSequence, start_id: int, params: ModelParams) -> ForwardTrace:
    """Score a caption against a feature without touching the tape.

    Inputs are the projected feature, the start id, then all caption ids
    but the last; the t-th recorded distribution predicts sequence.ids[t].
    """
    if not sequence.ids:
        raise ValueError("forward_sequence: sequence must contain at least the eos id")
    if not 0 <= start_id < params.dims.vocab:
        raise IndexError(f"forward_sequence: start id {start_id} out of range")
    with ad.no_grad():
        feat = feature if isinstance(feature, Tensor) else Tensor(feature)
        if feat.data.ndim != 1:
            raise ad.DimensionError(f"forward_sequence: feature must be 1-D, got shape {feat.shape}")
        state = zero_state(params, batch=1)
        state = advance_state(project_feature(_as_row(feat), params), state, params)
        distributions = []
        inputs = (start_id,) + sequence.ids[:-1]
        for tok in inputs:
            x = ad.take_rows(params.w_embed, np.array([tok], dtype=np.int64))
            state = advance_state(x, state, params)
            logp = ad.log_softmax(output_logits(state, params).data[0])
            distributions.append(np.exp(logp))
        final = LstmState(_as_vector(state.h), _as_vector(state.c))
    return ForwardTrace(distributions, final, sequence, start_id)


def step_distribution(state: LstmState, token_or_feature, params: ModelParams) -> tuple[LstmState, Tensor]:
    """Advance one decode step and return log-probabilities for the next id.

    The input is either an integer token id (embedded) or a 1-D feature
    vector (projected). State vectors are 1-D; the tape stays untouched.
    """
    with ad.no_grad():
        if isinstance(token_or_feature, (int, np.integer)):
            tok = int(token_or_feature)
            if not 0 <= tok < params.dims.vocab:
                raise IndexError(f"step_distribution: token id {tok} out of range")
            x = ad.take_rows(params.w_embed, np.array([tok], dtype=np.int64))
        else:
            feat = token_or_feature if isinstance(token_or_feature, Tensor) else Tensor(token_or_feature)
            if feat.data.ndim != 1:
                raise ad.DimensionError(
                    f"step_distribution: feature must be 1-D, got shape {feat.shape}"
                )
            x = project_feature(_as_row(feat), params)
        row_state = LstmState(_as_row(state.h), _as_row(state.c))
        new = advance_state(x, row_state, params)
        logp = ad.log_softmax(output_logits(new, params).data[0])
        return LstmState(_as_vector(new.h), _as_vector(new.c)), Tensor(logp)

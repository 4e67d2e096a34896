"""Decoder tests: initialization, recurrence math, trace/step agreement."""

import numpy as np
import numpy.testing as npt
import pytest

from mlcap import autodiff as ad
from mlcap.autodiff import Tensor
from mlcap.model import (
    Dims,
    LstmState,
    forward_sequence,
    init_params,
    lstm_step,
    step_distribution,
    zero_state,
)
from mlcap.vocab import TokenSequence
from tinymodels import prefix_free_params, random_params


def np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def np_lstm_step(x, h, c, params):
    """Straight-line numpy re-statement of one recurrence step."""
    hh = params.dims.hidden
    z = x @ params.w_x.data + h @ params.w_h.data + params.b_gates.data
    i = np_sigmoid(z[..., 0:hh])
    f = np_sigmoid(z[..., hh : 2 * hh])
    o = np_sigmoid(z[..., 2 * hh : 3 * hh])
    g = np.tanh(z[..., 3 * hh : 4 * hh])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new, h_new @ params.w_out.data + params.b_out.data


class TestDims:
    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError, match="hidden"):
            Dims(vocab=5, embed=3, hidden=0, feature=2)


class TestInit:
    def test_shapes_and_order(self):
        dims = Dims(vocab=7, embed=3, hidden=4, feature=5)
        p = init_params(dims, seed=0)
        shapes = {name: t.shape for name, t in p.named_parameters()}
        assert shapes == {
            "w_embed": (7, 3),
            "w_image": (5, 3),
            "b_image": (3,),
            "w_x": (3, 16),
            "w_h": (4, 16),
            "b_gates": (16,),
            "w_out": (4, 7),
            "b_out": (7,),
        }
        assert all(t.requires_grad for _, t in p.named_parameters())

    def test_weight_range_and_bias_values(self):
        p = init_params(Dims(9, 6, 5, 4), seed=3)
        for name in ("w_embed", "w_image", "w_x", "w_h", "w_out"):
            data = getattr(p, name).data
            assert np.abs(data).max() <= 0.08
        npt.assert_array_equal(p.b_image.data, 0.0)
        npt.assert_array_equal(p.b_out.data, 0.0)
        h = 5
        npt.assert_array_equal(p.b_gates.data[h : 2 * h], 1.0)
        npt.assert_array_equal(p.b_gates.data[:h], 0.0)
        npt.assert_array_equal(p.b_gates.data[2 * h :], 0.0)

    def test_seed_determinism(self):
        dims = Dims(6, 3, 4, 2)
        a = init_params(dims, seed=11)
        b = init_params(dims, seed=11)
        c = init_params(dims, seed=12)
        npt.assert_array_equal(a.w_embed.data, b.w_embed.data)
        assert not np.array_equal(a.w_embed.data, c.w_embed.data)


class TestLstmStep:
    def test_matches_numpy_restatement(self):
        rng = np.random.default_rng(7)
        p = random_params(seed=7)
        x = Tensor(rng.normal(size=(3, p.dims.embed)))
        state = LstmState(
            Tensor(rng.normal(size=(3, p.dims.hidden))),
            Tensor(rng.normal(size=(3, p.dims.hidden))),
        )
        new, logits = lstm_step(x, state, p)
        h_ref, c_ref, logits_ref = np_lstm_step(x.data, state.h.data, state.c.data, p)
        npt.assert_allclose(new.h.data, h_ref, atol=1e-14)
        npt.assert_allclose(new.c.data, c_ref, atol=1e-14)
        npt.assert_allclose(logits.data, logits_ref, atol=1e-14)

    def test_vector_and_row_forms_agree(self):
        rng = np.random.default_rng(8)
        p = random_params(seed=8)
        x = rng.normal(size=p.dims.embed)
        h = rng.normal(size=p.dims.hidden)
        c = rng.normal(size=p.dims.hidden)
        vec_state, vec_logits = lstm_step(Tensor(x), LstmState(Tensor(h), Tensor(c)), p)
        row_state, row_logits = lstm_step(
            Tensor(x[None, :]), LstmState(Tensor(h[None, :]), Tensor(c[None, :])), p
        )
        npt.assert_array_equal(vec_state.h.data, row_state.h.data[0])
        npt.assert_array_equal(vec_state.c.data, row_state.c.data[0])
        npt.assert_array_equal(vec_logits.data, row_logits.data[0])
        assert vec_logits.data.shape == (p.dims.vocab,)

    def test_zero_params_give_zero_hidden_state(self):
        p = prefix_free_params(np.zeros(5))
        state, _ = lstm_step(Tensor(np.ones(p.dims.embed)), zero_state(p), p)
        npt.assert_array_equal(state.h.data, 0.0)

    def test_embedding_dimension_mismatch(self):
        p = random_params()
        with pytest.raises(ad.DimensionError):
            lstm_step(Tensor(np.zeros((2, p.dims.embed + 1))), zero_state(p, batch=2), p)

    def test_full_step_gradient_check(self):
        rng = np.random.default_rng(9)
        p = random_params(vocab=5, embed=3, hidden=3, feature=2, seed=9)
        x = rng.normal(size=(2, 3))
        h0 = rng.normal(size=(2, 3))
        c0 = rng.normal(size=(2, 3))
        targets = np.array([4, 1])

        def loss(*_):
            state, logits = lstm_step(Tensor(x), LstmState(Tensor(h0), Tensor(c0)), p)
            return ad.sum_all(ad.cross_entropy_rows(logits, targets))

        tensors = [t for _, t in p.named_parameters()]
        assert ad.gradient_check(loss, tensors, h=1e-5) < 1e-5


class TestForwardSequence:
    def test_scored_step_count_and_row_sums(self):
        p = random_params(seed=4)
        seq = TokenSequence((4, 5, 2), "en")
        trace = forward_sequence(np.ones(p.dims.feature), seq, 3, p)
        assert len(trace.distributions) == len(seq.ids)
        for dist in trace.distributions:
            assert dist.shape == (p.dims.vocab,)
            npt.assert_allclose(dist.sum(), 1.0, atol=1e-12)
        assert trace.final_state.h.data.shape == (p.dims.hidden,)

    def test_matches_step_distribution_composition(self):
        p = random_params(seed=5)
        seq = TokenSequence((5, 4, 4, 2), "en")
        feature = np.linspace(-1.0, 1.0, p.dims.feature)
        start = 3
        trace = forward_sequence(feature, seq, start, p)
        state = zero_state(p)
        state, _ = step_distribution(state, feature, p)
        composed = []
        for tok in (start,) + seq.ids[:-1]:
            state, logp = step_distribution(state, tok, p)
            composed.append(np.exp(logp.data))
        for traced, stepped in zip(trace.distributions, composed):
            npt.assert_allclose(traced, stepped, atol=1e-12)
        npt.assert_allclose(trace.final_state.h.data, state.h.data, atol=1e-12)

    def test_rejects_empty_sequence(self):
        p = random_params()
        with pytest.raises(ValueError, match="eos"):
            forward_sequence(np.ones(p.dims.feature), TokenSequence((), "en"), 3, p)

    def test_rejects_bad_start_id(self):
        p = random_params()
        with pytest.raises(IndexError):
            forward_sequence(np.ones(p.dims.feature), TokenSequence((2,), "en"), p.dims.vocab, p)

    def test_leaves_tape_untouched(self):
        p = random_params()
        forward_sequence(np.ones(p.dims.feature), TokenSequence((4, 2), "en"), 3, p)
        for _, t in p.named_parameters():
            assert t.entry is None


class TestStepDistribution:
    def test_log_probabilities_normalize(self):
        p = random_params(seed=6)
        state, logp = step_distribution(zero_state(p), 3, p)
        npt.assert_allclose(np.exp(logp.data).sum(), 1.0, atol=1e-12)
        assert state.h.data.shape == (p.dims.hidden,)

    def test_prefix_free_model_ignores_input(self):
        scores = np.array([-50.0, 0.0, 1.0, 2.0, -3.0])
        p = prefix_free_params(scores)
        _, a = step_distribution(zero_state(p), 1, p)
        state, b = step_distribution(zero_state(p), np.ones(p.dims.feature), p)
        _, c = step_distribution(state, 4, p)
        npt.assert_array_equal(a.data, b.data)
        npt.assert_array_equal(a.data, c.data)
        npt.assert_allclose(a.data, ad.log_softmax(scores), atol=1e-12)

    def test_rejects_out_of_range_token(self):
        p = random_params()
        with pytest.raises(IndexError):
            step_distribution(zero_state(p), p.dims.vocab, p)

    def test_rejects_bad_feature_shape(self):
        p = random_params()
        with pytest.raises(ad.DimensionError):
            step_distribution(zero_state(p), np.ones((2, p.dims.feature)), p)

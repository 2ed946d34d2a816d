import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_seq
from retgen.decoder import (
    DecodeConfig,
    DecodeState,
    Hypothesis,
    correction_factor,
    decode,
    decode_with_docs,
    literal_correction_factor,
    mmi_rerank,
    mmi_scores,
    moe_next_dist,
    sample_hypotheses,
)
from retgen.retriever import build_index
from retgen.text import Document, DocumentStore


def simplex(rng, n, k):
    d = rng.random((n, k)) + 1e-3
    return d / d.sum(axis=1, keepdims=True)


def test_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(K=0)
    with pytest.raises(ValueError):
        DecodeConfig(num_hypotheses=0)
    with pytest.raises(ValueError):
        DecodeConfig(mode="beam")


def test_moe_examples():
    np.testing.assert_allclose(moe_next_dist([0.5, 0.5], [[0.8, 0.2], [0.2, 0.8]]), [0.5, 0.5])
    rng = np.random.default_rng(0)
    d = simplex(rng, 3, 6)
    np.testing.assert_array_equal(moe_next_dist([0.0, 1.0, 0.0], d), d[1])
    same = np.tile(d[0], (3, 1))
    np.testing.assert_allclose(moe_next_dist([0.2, 0.3, 0.5], same), d[0], atol=1e-15)
    with pytest.raises(ValueError, match="weights"):
        moe_next_dist([0.5, 0.5], d)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(2, 20), st.integers(0, 2**32 - 1))
def test_moe_is_simplex_and_preserves_support(K, V, seed):
    rng = np.random.default_rng(seed)
    d = simplex(rng, K, V)
    d[:, 0] = 0.0
    d /= d.sum(axis=1, keepdims=True)
    w = rng.dirichlet(np.ones(K))
    mix = moe_next_dist(w, d)
    assert abs(mix.sum() - 1) < 1e-9 and np.all(mix >= 0)
    assert mix[0] == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.floats(1e-9, 1e-3), st.integers(0, 2**32 - 1))
def test_moe_small_weights_bounded_deviation(K, eps, seed):
    rng = np.random.default_rng(seed)
    d = simplex(rng, K, 10)
    w = np.full(K, eps / K)
    w[0] = 1 - w[1:].sum()
    tv = 0.5 * np.abs(moe_next_dist(w, d) - d[0]).sum()
    assert tv <= eps * K


def test_correction_start_equals_base():
    state = DecodeState.start([0.2, 0.5, 0.3])
    F, w = correction_factor(state)
    np.testing.assert_allclose(F, 1.0)
    np.testing.assert_allclose(w, [0.2, 0.5, 0.3])


def test_correction_example():
    state = DecodeState.start([0.5, 0.5])
    state.prefix_log_probs = np.log([0.9, 0.1])
    _, w = correction_factor(state)
    np.testing.assert_allclose(w, [0.9, 0.1], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_log_space_matches_literal(K, seed):
    rng = np.random.default_rng(seed)
    base = rng.dirichlet(np.ones(K))
    prefix = rng.uniform(1e-6, 1.0, K)
    state = DecodeState.start(base)
    state.prefix_log_probs = np.log(prefix)
    F, w = correction_factor(state)
    F2, w2 = literal_correction_factor(base, prefix)
    np.testing.assert_allclose(F, F2, rtol=1e-9)
    np.testing.assert_allclose(w, w2, atol=1e-9)
    # softmax form
    logits = np.log(base) + np.log(prefix)
    soft = np.exp(logits - logits.max())
    np.testing.assert_allclose(w, soft / soft.sum(), atol=1e-9)


def test_correction_all_underflow_rejected():
    state = DecodeState.start([0.5, 0.5])
    state.prefix_log_probs = np.array([-np.inf, -np.inf])
    with pytest.raises(FloatingPointError, match="correction"):
        correction_factor(state)


def test_correction_survives_tiny_prefix_probs():
    state = DecodeState.start([0.5, 0.5])
    state.prefix_log_probs = np.array([-2000.0, -2001.0])
    _, w = correction_factor(state)
    np.testing.assert_allclose(w, [1 / (1 + np.exp(-1)), 1 - 1 / (1 + np.exp(-1))])


def test_weights_renormalized_along_decode(tiny_lm, rng):
    x = random_seq(rng, 3)
    docs = [random_seq(rng, 3) for _ in range(4)]
    base = rng.dirichlet(np.ones(4))
    hyp = decode_with_docs(tiny_lm, x, docs, base, DecodeConfig(K=4, max_len=8), trace=True)
    assert hyp.weights_trace
    np.testing.assert_allclose(hyp.weights_trace[0], base, atol=1e-12)
    for w in hyp.weights_trace:
        assert abs(sum(w) - 1) < 1e-9


def test_incremental_prefix_matches_recomputation(tiny_lm, rng):
    x = random_seq(rng, 3)
    docs = [random_seq(rng, 3) for _ in range(3)]
    base = np.array([0.5, 0.3, 0.2])
    hyp = decode_with_docs(tiny_lm, x, docs, base, DecodeConfig(K=3, max_len=6), trace=True)
    for t, w in enumerate(hyp.weights_trace):
        lp = np.array([tiny_lm.log_prob(hyp.tokens[:t], x, z).item() for z in docs])
        state = DecodeState.start(base)
        state.prefix_log_probs = lp
        np.testing.assert_allclose(correction_factor(state)[1], w, atol=1e-9)


def test_k1_matches_single_doc_greedy(tiny_lm, rng):
    x, z = random_seq(rng, 3), random_seq(rng, 4)
    hyp = decode_with_docs(tiny_lm, x, [z], [1.0], DecodeConfig(K=1, max_len=6))
    prefix = []
    for _ in range(6):
        tok = int(np.argmax(tiny_lm.next_token_dist(x, z, prefix)))
        if tok == 2:
            break
        prefix.append(tok)
    assert hyp.tokens == prefix
    off = decode_with_docs(tiny_lm, x, [z], [1.0], DecodeConfig(K=1, max_len=6, correction=False))
    assert off.tokens == hyp.tokens and off.forward_score == hyp.forward_score


def _store_and_index(tiny_retriever, n=6):
    store = DocumentStore(Document(f"d{i}", "", [5 + i, 10 + i, 15 + i], "") for i in range(n))
    return store, build_index(store, tiny_retriever, L=4, b=3)


def test_decode_is_deterministic(tiny_lm, tiny_retriever):
    store, idx = _store_and_index(tiny_retriever)
    cfg = DecodeConfig(K=3, max_len=5)
    a, ra = decode([6, 7], idx, tiny_retriever, tiny_lm, store, cfg)
    b, rb = decode([6, 7], idx, tiny_retriever, tiny_lm, store, cfg)
    assert a.tokens == b.tokens and ra.doc_ids == rb.doc_ids and len(ra.doc_ids) == 3
    assert np.isfinite(a.forward_score)


def test_sampling_streams_independent_of_count(tiny_lm, rng):
    x, docs = random_seq(rng, 3), [random_seq(rng, 3) for _ in range(2)]
    few = sample_hypotheses(tiny_lm, x, docs, [0.6, 0.4], DecodeConfig(K=2, num_hypotheses=3, max_len=5, seed=4))
    many = sample_hypotheses(tiny_lm, x, docs, [0.6, 0.4], DecodeConfig(K=2, num_hypotheses=6, max_len=5, seed=4))
    assert [h.tokens for h in few] == [h.tokens for h in many[:3]]


def test_topk_sampling_restricted_to_top(tiny_lm, rng):
    x, z = random_seq(rng, 3), random_seq(rng, 3)
    cfg = DecodeConfig(K=1, mode="topk", sample_topk=1, max_len=5)
    greedy = decode_with_docs(tiny_lm, x, [z], [1.0], DecodeConfig(K=1, max_len=5))
    assert decode_with_docs(tiny_lm, x, [z], [1.0], cfg).tokens == greedy.tokens


def test_mmi_single_and_duplicates(tiny_lm, rng):
    x, docs = random_seq(rng, 2), [random_seq(rng, 2) for _ in range(3)]
    h = Hypothesis([7, 8], -1.0)
    assert mmi_rerank(x, docs, [h], tiny_lm) == [h]
    dup = [Hypothesis([7, 8], -2.0), Hypothesis([9], -1.0), Hypothesis([7, 8], -3.0)]
    ranked = mmi_rerank(x, docs, dup, tiny_lm)
    assert dup[0].backward_score == dup[2].backward_score
    # equal backward score: higher forward score first
    assert ranked.index(dup[0]) < ranked.index(dup[2])


def test_mmi_mean_of_probabilities(tiny_lm, rng):
    x, docs = random_seq(rng, 2), [random_seq(rng, 2) for _ in range(3)]
    hyps = [Hypothesis([7, 8], 0.0)]
    per_doc = np.array([tiny_lm.backward_log_prob(z, x, [7, 8]).item() for z in docs])
    assert mmi_scores(tiny_lm, x, docs, hyps)[0] == pytest.approx(np.log(np.exp(per_doc).mean()))
    assert mmi_scores(tiny_lm, x, docs, hyps, "log")[0] == pytest.approx(per_doc.mean())

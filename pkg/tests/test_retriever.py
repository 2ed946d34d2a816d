import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_seq
from retgen import autodiff as ad
from retgen.retriever import (
    build_index,
    exhaustive_top_k,
    load_index,
    refresh_if_due,
    retrieve,
    save_index,
    score,
)
from retgen.text import Document, DocumentStore


def unit_vectors(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_score_examples():
    assert score([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert score([1.0, 2.0], [3.0, 4.0]) == 11.0
    a, b = np.array([0.3, -1.2]), np.array([2.0, 0.7])
    assert score(a, b) == score(b, a)
    with pytest.raises(ad.ShapeError, match="mismatch"):
        score([1.0], [1.0, 2.0])


def test_encoder_shapes_and_determinism(tiny_retriever):
    x = [5, 6, 7]
    a, b = tiny_retriever.encode_query(x), tiny_retriever.encode_query(x)
    assert a.shape == (4,) and tiny_retriever.encode_document(x).shape == (4,)
    np.testing.assert_array_equal(a.data, b.data)
    assert np.all(np.isfinite(a.data))
    with pytest.raises(ValueError, match="empty"):
        tiny_retriever.encode_query([])


@pytest.mark.parametrize("seed", range(5))
def test_score_gradient_matches_finite_differences(tiny_retriever, seed):
    rng = np.random.default_rng(seed)
    x, z = random_seq(rng, 4), random_seq(rng, 6)
    params = tiny_retriever.parameters()

    def s():
        return score(tiny_retriever.encode_query(x), tiny_retriever.encode_document(z))

    with ad.Tape() as tape:
        out = s()
    g = ad.backward(out, tape, params)
    fd = ad.finite_difference_grad(lambda: s().item(), params)
    for p in params:
        assert ad.relative_error(g[p.name], fd[p.name]) < 1e-4


def test_hand_vectors_exhaustive():
    idx = build_index(["doc1", "doc2", "doc3"], [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]], L=4, b=2)
    res = retrieve(idx, np.array([1.0, 0.0]), 2, "exhaustive")
    assert res.doc_ids == ["doc1", "doc3"]
    np.testing.assert_allclose(res.scores, [1.0, 0.5])
    assert abs(res.probs.sum() - 1) < 1e-9


def test_ties_break_by_doc_id():
    idx = build_index(["b", "c", "a"], np.ones((3, 2)), L=2, b=2)
    res = retrieve(idx, np.array([1.0, 1.0]), 3, "exhaustive")
    assert res.doc_ids == ["a", "b", "c"]
    np.testing.assert_allclose(res.probs, 1 / 3)


def test_k_bounds():
    idx = build_index(["a", "b"], np.eye(2), L=2, b=2)
    with pytest.raises(ValueError):
        retrieve(idx, np.ones(2), 3)
    with pytest.raises(ValueError):
        retrieve(idx, np.ones(2), 0)


def test_index_construction_rules():
    idx = build_index(["a", "b", "c"], np.eye(3), L=5, b=3, seed=2)
    assert idx.codes.shape == (5, 3)
    for table in idx.tables:
        assert sorted(np.concatenate(list(table.values())).tolist()) == [0, 1, 2]
    again = build_index(["a", "b", "c"], np.eye(3), L=5, b=3, seed=2)
    np.testing.assert_array_equal(idx.hyperplanes, again.hyperplanes)
    np.testing.assert_array_equal(idx.codes, again.codes)
    with pytest.raises(ValueError):
        build_index(["a"], np.eye(1), L=2, b=0)
    with pytest.raises(ValueError):
        build_index(["a"], np.eye(1), L=0, b=2)
    with pytest.raises(ValueError, match="empty"):
        build_index(DocumentStore([]), None)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 6), elements=st.floats(-20, 20)), st.floats(-50, 50))
def test_probs_shift_invariant(scores, c):
    ids = [f"d{i}" for i in range(len(scores))]
    emb = np.zeros((len(scores), 2))
    emb[:, 0] = scores
    idx = build_index(ids, emb, L=1, b=1)
    a = retrieve(idx, np.array([1.0, 0.0]), len(scores), "exhaustive")
    emb[:, 1] = 1.0
    idx2 = build_index(ids, emb, L=1, b=1)
    b = retrieve(idx2, np.array([1.0, c]), len(scores), "exhaustive")
    np.testing.assert_allclose(a.probs, b.probs, atol=1e-9)
    assert np.all(np.diff(a.scores) <= 0)


def test_lsh_overlap_with_exhaustive():
    rng = np.random.default_rng(0)
    emb = unit_vectors(rng, 1000, 32)
    idx = build_index([f"d{i:04d}" for i in range(1000)], emb, L=32, b=8, seed=1)
    overlaps = []
    for q in unit_vectors(rng, 100, 32):
        truth = set(exhaustive_top_k(idx.embeddings, q, 10).tolist())
        got = retrieve(idx, q, 10, "lsh")
        pos = {d: i for i, d in enumerate(idx.doc_ids)}
        overlaps.append(len(truth & {pos[d] for d in got.doc_ids}) / 10)
    assert np.mean(overlaps) >= 0.9


def test_lsh_ranks_agree_with_exhaustive_where_they_overlap():
    rng = np.random.default_rng(3)
    emb = unit_vectors(rng, 300, 8)
    idx = build_index([f"d{i:03d}" for i in range(300)], emb, L=4, b=6, seed=0, probe_radius=0)
    for q in unit_vectors(rng, 20, 8):
        ex = retrieve(idx, q, 10, "exhaustive").doc_ids
        ls = retrieve(idx, q, 10, "lsh").doc_ids
        shared = [d for d in ls if d in ex]
        assert shared == [d for d in ex if d in shared]


def test_candidates_grow_with_tables():
    rng = np.random.default_rng(4)
    emb = unit_vectors(rng, 500, 16)
    idx = build_index([str(i) for i in range(500)], emb, L=16, b=8, seed=0, probe_radius=0)
    q = unit_vectors(rng, 1, 16)[0]
    sizes = [len(idx.candidates(q, L)) for L in (1, 2, 4, 8, 16)]
    assert sizes == sorted(sizes)


def _store(n):
    return DocumentStore(Document(f"d{i}", "", [5 + i, 6 + i], "") for i in range(n))


def test_refresh_schedule(tiny_retriever):
    store = _store(5)
    idx = build_index(store, tiny_retriever, L=2, b=3)
    assert refresh_if_due(idx, 199, 200, store, tiny_retriever) is idx
    new = refresh_if_due(idx, 200, 200, store, tiny_retriever)
    assert new is not idx and new.snapshot_step == 200 and idx.snapshot_step == 0
    assert refresh_if_due(new, 201, 1, store, tiny_retriever).snapshot_step == 201
    with pytest.raises(ValueError):
        refresh_if_due(idx, 5, 0, store, tiny_retriever)


def test_fresh_scores_after_update(tiny_retriever):
    store = _store(6)
    idx = build_index(store, tiny_retriever, L=2, b=3)
    tiny_retriever.d_proj.data += 0.3
    tiny_retriever.q_emb.data *= 1.5
    x = [7, 8]
    h = tiny_retriever.encode_query(x).data
    res = retrieve(idx, h, 3, "exhaustive", encoder=tiny_retriever, store=store)
    direct = [score(tiny_retriever.encode_query(x).data, tiny_retriever.encode_document(store[d].text).data)
              for d in res.doc_ids]
    np.testing.assert_allclose(res.scores, direct, rtol=1e-12)


def test_index_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    idx = build_index([f"d{i}" for i in range(20)], rng.standard_normal((20, 4)), L=3, b=4, seed=9,
                      snapshot_step=7)
    save_index(tmp_path / "i.npz", idx)
    back = load_index(tmp_path / "i.npz")
    assert back.doc_ids == idx.doc_ids and back.snapshot_step == 7 and back.seed == 9
    np.testing.assert_array_equal(back.codes, idx.codes)

import numpy as np
import pytest

from conftest import random_seq
from retgen import autodiff as ad
from retgen.generator import GeneratorConfig, GroundedLM, LayoutError, layout_input
from retgen.text import SEP_ID
from retgen.trainer import fit_sequences, train_backward_model, with_eos


def test_layout_positions_and_types():
    lay = layout_input([7, 8, 9], [10, 11], [12], doc_pos_offset=400)
    np.testing.assert_array_equal(lay.tokens, [7, 8, 9, SEP_ID, 10, 11, 12])
    np.testing.assert_array_equal(lay.positions[:3], [400, 401, 402])
    np.testing.assert_array_equal(lay.positions[4:], [0, 1, 2])
    np.testing.assert_array_equal(lay.types, [1, 1, 1, 0, 0, 0, 0])
    np.testing.assert_array_equal(lay.target_mask, [0, 0, 0, 0, 0, 0, 1])


@pytest.mark.parametrize("offset", [300, 400])
def test_layout_offset_only_moves_doc_positions(offset):
    lay = layout_input([5, 6], [7], [8, 9], doc_pos_offset=offset)
    assert lay.positions[0] == offset and lay.positions[2] == offset + 2
    np.testing.assert_array_equal(lay.positions[3:], [0, 1, 2])


def test_layout_overflow_rejected():
    with pytest.raises(LayoutError, match="position"):
        layout_input([1] * 5, [2], doc_pos_offset=10, max_positions=12)
    with pytest.raises(LayoutError, match="position"):
        layout_input([], list(range(5, 20)), doc_pos_offset=0, max_positions=12)


def test_doc_cap_enforced(tiny_lm):
    with pytest.raises(LayoutError, match="doc_cap"):
        tiny_lm.layout([5] * 9, [6])


def test_empty_target_is_zero(tiny_lm):
    assert tiny_lm.log_prob([], [5, 6], [7]).item() == 0.0
    assert tiny_lm.backward_log_prob([], [], [5]).item() == 0.0


def test_single_token_is_softmax_entry(tiny_lm):
    z, x = [5, 6], [7, 8]
    dist = tiny_lm.next_token_dist(x, z)
    assert tiny_lm.log_prob([9], x, z).item() == pytest.approx(np.log(dist[9]), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_chain_rule_and_simplex(tiny_lm, seed):
    rng = np.random.default_rng(seed)
    z, x, y = random_seq(rng, 3), random_seq(rng, 4), random_seq(rng, 5)
    total = 0.0
    for t in range(len(y)):
        d = tiny_lm.next_token_dist(x, z, y[:t])
        assert abs(d.sum() - 1.0) < 1e-9
        total += np.log(d[y[t]])
    assert abs(total - tiny_lm.log_prob(y, x, z).item()) < 1e-9


def test_backward_chain_rule(tiny_lm, rng):
    z, x, y = random_seq(rng, 3), random_seq(rng, 2), random_seq(rng, 3)
    target = [*z, SEP_ID, *x]
    total = 0.0
    for t, tok in enumerate(target):
        if tok == SEP_ID and t == len(z):
            continue
        lay = layout_input(y, (), target[:t], tiny_lm.config.doc_pos_offset)
        total += tiny_lm.next_token_log_probs([lay])[0, tok]
    assert abs(total - tiny_lm.backward_log_prob(z, x, y).item()) < 1e-9


def test_causality(tiny_lm, rng):
    z, x, y = random_seq(rng, 3), random_seq(rng, 3), random_seq(rng, 6)
    y2 = y[:3] + random_seq(rng, 3)
    a = tiny_lm.next_token_log_probs([tiny_lm.layout(z, x, y), tiny_lm.layout(z, x, y2)])
    b = tiny_lm.next_token_dist(x, z, y[:3])
    # the distribution after y[:3] ignores everything that follows
    lay1 = tiny_lm.layout(z, x, y[:3])
    np.testing.assert_allclose(np.exp(tiny_lm.next_token_log_probs([lay1])[0]), b, atol=1e-12)
    # full-sequence scoring restricted to the shared prefix agrees
    mask = [True] * 3 + [False] * 3
    s1 = tiny_lm.sequence_log_probs([tiny_lm.layout(z, x, y, mask), tiny_lm.layout(z, x, y2, mask)]).data
    assert abs(s1[0] - s1[1]) < 1e-12
    assert a.shape == (2, tiny_lm.config.vocab_size)


def test_appending_token_adds_its_log_prob(tiny_lm):
    z, x, y = [5, 6], [7], [8]
    dist = tiny_lm.next_token_dist(x, z, y)
    for tok in (int(np.argmax(dist)), int(np.argmin(dist))):
        delta = tiny_lm.log_prob(y + [tok], x, z).item() - tiny_lm.log_prob(y, x, z).item()
        assert delta == pytest.approx(np.log(dist[tok]), abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_log_prob_gradients_match_finite_differences(seed):
    lm = GroundedLM(GeneratorConfig(12, dim=4, layers=2, heads=2, doc_pos_offset=6, doc_cap=3,
                                    max_context=4, max_target=4), seed=seed)
    rng = np.random.default_rng(seed)
    z, x, y = random_seq(rng, 2, 5, 12), random_seq(rng, 2, 5, 12), random_seq(rng, 3, 5, 12)
    params = lm.parameters()
    with ad.Tape() as tape:
        lp = lm.log_prob(y, x, z)
    g = ad.backward(lp, tape, params)
    fd = ad.finite_difference_grad(lambda: lm.log_prob(y, x, z).item(), params)
    for p in params:
        assert ad.relative_error(g[p.name], fd[p.name]) < 1e-4, p.name


def test_parameter_ids_unique(tiny_lm):
    names = [p.name for p in tiny_lm.parameters()]
    assert len(names) == len(set(names))
    with pytest.raises(ValueError, match="duplicate"):
        tiny_lm.param("w_out", np.zeros(1))


def test_grounding_sensitivity_after_training(small_synth):
    s = small_synth
    lm = GroundedLM(GeneratorConfig(len(s.vocab), dim=16, layers=1, heads=2), seed=0)
    fit_sequences(lm, lambda ex: lm.layout(s.store[ex.oracle_doc_id].text, ex.context, with_eos(ex.target)),
                  s.examples, 60, lr=3e-3)
    ex = s.examples[0]
    other = next(d for d in s.store if d.id != ex.oracle_doc_id)
    p1 = lm.next_token_dist(ex.context, s.store[ex.oracle_doc_id].text)
    p2 = lm.next_token_dist(ex.context, other.text)
    assert 0.5 * np.abs(p1 - p2).sum() > 0


def test_backward_model_prefers_oracle_doc(small_synth):
    s = small_synth
    train, held = s.examples[:-100], s.examples[-100:]
    cfg = GeneratorConfig(len(s.vocab), dim=32, layers=2, heads=2, doc_cap=16, max_context=40)
    bwd = GroundedLM(cfg, seed=0, prefix="bwd.")
    train_backward_model(bwd, train, s.store, 300, lr=3e-3)
    rng = np.random.default_rng(0)
    ids = s.store.ids
    good, bad = [], []
    for ex in held:
        wrong = ids[rng.integers(len(ids))]
        while wrong == ex.oracle_doc_id:
            wrong = ids[rng.integers(len(ids))]
        good.append(bwd.backward_log_prob(s.store[ex.oracle_doc_id].text, ex.context, ex.target).item())
        bad.append(bwd.backward_log_prob(s.store[wrong].text, ex.context, ex.target).item())
    assert np.mean(good) > np.mean(bad)

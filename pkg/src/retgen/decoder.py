"""Multi-document mixture decoding with retriever correction and MMI reranking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .generator import GroundedLM
from .retriever import DualEncoder, EmbeddingIndex, RetrievalResult, retrieve
from .text import EOS_ID, DocumentStore


@dataclass
class DecodeConfig:
    K: int = 4
    mode: str = "greedy"
    sample_topk: int = 10
    temperature: float = 1.0
    max_len: int = 16
    correction: bool = True
    num_hypotheses: int = 16
    retrieval_mode: str = "lsh"
    mmi_mean: str = "prob"
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.num_hypotheses < 1:
            raise ValueError("num_hypotheses must be >= 1")
        if self.mode not in ("greedy", "topk"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.mmi_mean not in ("prob", "log"):
            raise ValueError(f"unknown MMI averaging {self.mmi_mean!r}")


@dataclass
class DecodeState:
    base_log_probs: np.ndarray
    prefix_log_probs: np.ndarray
    y_prefix: list[int] = field(default_factory=list)
    weights: np.ndarray | None = None
    step: int = 0

    @classmethod
    def start(cls, base_probs) -> "DecodeState":
        base = np.asarray(base_probs, dtype=np.float64)
        with np.errstate(divide="ignore"):
            logb = np.log(base)
        return cls(logb, np.zeros(len(base)), [], base / base.sum(), 0)


@dataclass
class Hypothesis:
    tokens: list[int]
    forward_score: float
    backward_score: float = float("nan")
    weights_trace: list[list[float]] = field(default_factory=list)


def _log_softmax(v: np.ndarray) -> np.ndarray:
    m = np.max(v)
    return v - m - np.log(np.exp(v - m).sum())


def correction_factor(state: DecodeState) -> tuple[np.ndarray, np.ndarray]:
    """Per-document factor F_t and the corrected document weights.

    F_t(k) = p(y_<t | z_k, x) / sum_j p(y_<t | z_j, x) p(z_j | x).  The
    corrected weight p(z_k | x) F_t(k) is evaluated as a softmax over
    log p(z_k|x) + log p(y_<t | z_k, x).
    """
    joint = state.base_log_probs + state.prefix_log_probs
    if not np.any(np.isfinite(joint)):
        raise FloatingPointError("every document assigns the prefix probability 0; correction undefined")
    log_evidence = np.logaddexp.reduce(joint)
    F = np.exp(state.prefix_log_probs - log_evidence)
    return F, np.exp(joint - log_evidence)


def literal_correction_factor(base_probs, prefix_probs) -> tuple[np.ndarray, np.ndarray]:
    """The same quantities evaluated directly in probability space."""
    base = np.asarray(base_probs, dtype=np.float64)
    pref = np.asarray(prefix_probs, dtype=np.float64)
    F = pref / np.sum(pref * base)
    return F, base * F


def moe_next_dist(weights, dists) -> np.ndarray:
    """Convex combination ``sum_k w_k dist_k`` of per-document next-token distributions."""
    w = np.asarray(weights, dtype=np.float64)
    d = np.asarray(dists, dtype=np.float64)
    if d.ndim != 2 or w.shape != (d.shape[0],):
        raise ValueError(f"{w.shape[0] if w.ndim else w} weights for {d.shape[0] if d.ndim else 0} distributions")
    return w @ d


def _choose(mix: np.ndarray, config: DecodeConfig, rng: np.random.Generator | None) -> int:
    if config.mode == "greedy":
        return int(np.argmax(mix))
    k = min(config.sample_topk, len(mix))
    top = np.argsort(-mix, kind="stable")[:k]
    p = mix[top]
    if config.temperature != 1.0:
        with np.errstate(divide="ignore"):
            lp = np.log(p) / config.temperature
        p = np.exp(lp - lp.max())
    p = p / p.sum()
    return int(top[rng.choice(k, p=p)])


def decode_with_docs(generator: GroundedLM, x: Sequence[int], docs: Sequence[Sequence[int]],
                     base_probs, config: DecodeConfig, rng: np.random.Generator | None = None,
                     trace: bool = False) -> Hypothesis:
    """Generate from a fixed set of documents and their retrieval probabilities.

    Every step runs each document's expert on the shared consensus prefix,
    mixes the K next-token distributions with the (corrected) weights and
    picks a token.  Per-document prefix log-probs are updated incrementally.
    """
    if config.mode == "topk" and rng is None:
        rng = np.random.default_rng(config.seed)
    state = DecodeState.start(base_probs)
    forward = 0.0
    hyp = Hypothesis([], 0.0)
    for _ in range(config.max_len):
        if config.correction:
            _, state.weights = correction_factor(state)
        layouts = [generator.layout(z, x, state.y_prefix) for z in docs]
        logd = generator.next_token_log_probs(layouts)
        mix = moe_next_dist(state.weights, np.exp(logd))
        if trace:
            hyp.weights_trace.append(state.weights.tolist())
        tok = _choose(mix, config, rng)
        forward += float(np.log(mix[tok]))
        state.prefix_log_probs = state.prefix_log_probs + logd[:, tok]
        state.step += 1
        if tok == EOS_ID:
            break
        state.y_prefix.append(tok)
    hyp.tokens = list(state.y_prefix)
    hyp.forward_score = forward
    return hyp


def retrieve_for(x, index: EmbeddingIndex, retriever: DualEncoder, store: DocumentStore, K: int,
                 mode: str = "lsh") -> RetrievalResult:
    h = retriever.encode_query(x).data
    return retrieve(index, h, K, mode, encoder=retriever, store=store)


def decode(x, index: EmbeddingIndex, retriever: DualEncoder, generator: GroundedLM, store: DocumentStore,
           config: DecodeConfig, trace: bool = False) -> tuple[Hypothesis, RetrievalResult]:
    """Retrieve top-K once, then mixture-decode."""
    res = retrieve_for(x, index, retriever, store, config.K, config.retrieval_mode)
    docs = [store[i].text for i in res.doc_ids]
    rng = np.random.default_rng(config.seed) if config.mode == "topk" else None
    return decode_with_docs(generator, x, docs, res.probs, config, rng, trace), res


def sample_hypotheses(generator: GroundedLM, x, docs, base_probs, config: DecodeConfig) -> list[Hypothesis]:
    """``num_hypotheses`` top-k samples, each from its own RNG sub-stream."""
    cfg = DecodeConfig(**{**config.__dict__, "mode": "topk"})
    streams = np.random.SeedSequence(config.seed).spawn(config.num_hypotheses)
    return [decode_with_docs(generator, x, docs, base_probs, cfg, np.random.default_rng(s)) for s in streams]


def mmi_scores(backward_model: GroundedLM, x, docs: Sequence[Sequence[int]], hypotheses: Sequence[Hypothesis],
               mean: str = "prob") -> np.ndarray:
    """Backward score per hypothesis, averaged over the documents.

    ``mean="prob"``: log of the mean of p(z, x | y); ``"log"``: mean of the logs.
    """
    if not hypotheses:
        return np.zeros(0)
    layouts = [backward_model.backward_layout(z, x, h.tokens) for h in hypotheses for z in docs]
    lp = backward_model.sequence_log_probs(layouts).data.reshape(len(hypotheses), len(docs))
    if mean == "log":
        return lp.mean(axis=1)
    return np.logaddexp.reduce(lp, axis=1) - np.log(len(docs))


def mmi_rerank(x, docs: Sequence[Sequence[int]], hypotheses: Sequence[Hypothesis],
               backward_model: GroundedLM, mean: str = "prob") -> list[Hypothesis]:
    """Sort hypotheses by backward score, then forward score, then input order."""
    scores = mmi_scores(backward_model, x, docs, hypotheses, mean)
    for h, s in zip(hypotheses, scores):
        h.backward_score = float(s)
    order = sorted(range(len(hypotheses)),
                   key=lambda i: (-hypotheses[i].backward_score, -hypotheses[i].forward_score, i))
    return [hypotheses[i] for i in order]

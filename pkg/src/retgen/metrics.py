"""Generation and retrieval metrics.

All text inputs are token sequences (strings or ids); KMR works on sets,
BLEU/Dist/Entropy on n-gram multisets.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

Tokens = Sequence[Hashable]


class UndefinedMetric(ValueError):
    pass


# ---------------------------------------------------------------------------
# KMR


def kmr_single(hyp: Tokens, context: Tokens, doc: Tokens, stopwords: Iterable = ()) -> float | None:
    """Share of document keywords (not in the context) that the hypothesis uses.

    Returns None when the document has no keywords left.
    """
    stop = set(stopwords)
    kwords = (set(doc) - stop) - (set(context) - stop)
    if not kwords:
        return None
    return len((set(hyp) - stop) & kwords) / len(kwords)


def kmr(hyp: Tokens, context: Tokens, documents: Sequence[Tokens], stopwords: Iterable = ()) -> float | None:
    """Max over documents of the per-document KMR; None when undefined for all."""
    if not documents:
        raise ValueError("KMR needs at least one document")
    stop = frozenset(stopwords)
    vals = [v for v in (kmr_single(hyp, context, d, stop) for d in documents) if v is not None]
    return max(vals) if vals else None


@dataclass
class MeanWithCount:
    value: float
    count: int
    undefined: int = 0


def corpus_kmr(hyps: Sequence[Tokens], contexts: Sequence[Tokens], docs: Sequence[Sequence[Tokens]],
               stopwords: Iterable = ()) -> MeanWithCount:
    stop = frozenset(stopwords)
    vals, undefined = [], 0
    for h, x, ds in zip(hyps, contexts, docs):
        v = kmr(h, x, ds, stop)
        if v is None:
            undefined += 1
        else:
            vals.append(v)
    return MeanWithCount(float(np.mean(vals)) if vals else float("nan"), len(vals), undefined)


# ---------------------------------------------------------------------------
# BLEU


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(hyp_len: int, refs: Sequence[Tokens]) -> int:
    return min((abs(len(r) - hyp_len), len(r)) for r in refs)[1]


def _bleu_from_counts(matches, totals, hyp_len, ref_len, max_order) -> float:
    if hyp_len == 0 or any(m == 0 for m in matches[:max_order]):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_order
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def _stats(hyp: Tokens, refs: Sequence[Tokens], max_order: int):
    matches, totals = [0] * max_order, [0] * max_order
    for n in range(1, max_order + 1):
        h = ngrams(hyp, n)
        best: Counter = Counter()
        for r in refs:
            best |= ngrams(r, n)
        matches[n - 1] = sum(min(c, best[g]) for g, c in h.items())
        totals[n - 1] = max(len(hyp) - n + 1, 0)
    return matches, totals


def bleu(hypotheses: Sequence[Tokens], reference_sets: Sequence[Sequence[Tokens]], max_order: int = 4) -> float:
    """Corpus BLEU: clipped n-gram precisions against all references,
    brevity penalty from the closest reference length."""
    if not hypotheses:
        raise ValueError("BLEU needs at least one hypothesis")
    if len(hypotheses) != len(reference_sets):
        raise ValueError("hypotheses and reference sets are not aligned")
    matches, totals = [0] * max_order, [0] * max_order
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, reference_sets):
        m, t = _stats(hyp, refs, max_order)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        hyp_len += len(hyp)
        ref_len += _closest_ref_len(len(hyp), refs)
    return _bleu_from_counts(matches, totals, hyp_len, ref_len, max_order)


def sentence_bleu(hyp: Tokens, ref: Tokens, max_order: int = 4) -> float:
    m, t = _stats(hyp, [ref], max_order)
    return _bleu_from_counts(m, t, len(hyp), len(ref), max_order)


def max_pooled_bleu(hypotheses: Sequence[Tokens], reference_sets: Sequence[Sequence[Tokens]],
                    max_order: int = 4) -> float:
    """Per instance, the best single-reference sentence BLEU; averaged over instances."""
    if not hypotheses:
        raise ValueError("BLEU needs at least one hypothesis")
    return float(np.mean([max(sentence_bleu(h, r, max_order) for r in refs)
                          for h, refs in zip(hypotheses, reference_sets)]))


# ---------------------------------------------------------------------------
# diversity


def _corpus_ngrams(hypotheses: Sequence[Tokens], n: int) -> Counter:
    if n < 1:
        raise ValueError("n must be >= 1")
    counts: Counter = Counter()
    for h in hypotheses:
        counts.update(ngrams(h, n))
    if not counts:
        raise UndefinedMetric(f"no hypothesis has {n} or more tokens")
    return counts


def distinct_n(hypotheses: Sequence[Tokens], n: int) -> float:
    counts = _corpus_ngrams(hypotheses, n)
    return len(counts) / sum(counts.values())


def entropy_n(hypotheses: Sequence[Tokens], n: int) -> float:
    """Shannon entropy (nats) of the corpus n-gram distribution."""
    counts = _corpus_ngrams(hypotheses, n)
    total = sum(counts.values())
    p = np.array(list(counts.values()), dtype=np.float64) / total
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# retrieval


@dataclass
class RecallResult:
    recall: float
    count: int
    skipped: int = 0


def recall_at_k(retriever, store, pairs, K: int, index=None, mode: str = "exhaustive") -> RecallResult:
    """Fraction of (context, oracle doc) pairs whose oracle lands in the top-K.

    Exhaustive mode scores every document with fresh embeddings; ``lsh``
    mode uses ``index`` for candidate selection.
    """
    from .retriever import retrieve

    usable = [ex for ex in pairs if ex.oracle_doc_id is not None and ex.oracle_doc_id in store]
    skipped = len(pairs) - len(usable)
    if not usable:
        return RecallResult(float("nan"), 0, skipped)
    hx = retriever.encode_queries([ex.context for ex in usable]).data
    hits = 0
    if mode == "exhaustive":
        emb = retriever.embed_store(store)
        sc = hx @ emb.T
        pos = {d: i for i, d in enumerate(store.ids)}
        id_rank = np.argsort(np.argsort(np.asarray(store.ids, dtype=object), kind="stable"))
        for ex, row in zip(usable, sc):
            # ties go to the smaller doc id
            top = np.lexsort((id_rank, -row))[:K]
            hits += pos[ex.oracle_doc_id] in top
    else:
        if index is None:
            raise ValueError("lsh recall needs an index")
        for ex, h in zip(usable, hx):
            hits += ex.oracle_doc_id in retrieve(index, h, K, "lsh").doc_ids
    return RecallResult(hits / len(usable), len(usable), skipped)

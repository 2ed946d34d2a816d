"""End-to-end runs on the synthetic grounded-copy corpus.

One seed of :func:`run_grounded_copy` trains, from the same warm-started
retriever:

* the joint model (generator + retriever),
* the frozen-retriever ablation,
* a no-retrieval generator on identical data and steps,
* a backward model for MMI reranking,

then measures recall, validation loss, KMR of mixture decodes for
K = 1..4, MMI ranking and a retriever-only training curve.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .decoder import DecodeConfig, Hypothesis, decode_with_docs, mmi_rerank
from .generator import GeneratorConfig, GroundedLM
from .metrics import corpus_kmr, recall_at_k
from .retriever import DualEncoder, RetrieverConfig
from .text import (
    RESERVED,
    SyntheticConfig,
    build_stopwords,
    build_vocab_from_texts,
    documents_from_records,
    examples_from_records,
    make_synthetic_grounded_corpus,
)
from .trainer import (
    JointConfig,
    JointTrainer,
    marginal_nll_from,
    retriever_only_training,
    train_backward_model,
    train_no_retrieval_baseline,
    warm_start_retriever,
    with_eos,
)

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    synthetic: SyntheticConfig = field(default_factory=lambda: SyntheticConfig(
        n_docs=100, n_examples=2000, vocab_size=600, key_len=2, fact_len=3, n_distractors=3,
        key_pool=30, fact_pool=40))
    n_valid: int = 200
    gen_dim: int = 32
    gen_layers: int = 2
    gen_heads: int = 2
    ret_dim: int = 32
    warm_start_steps: int = 200
    warm_start_lr: float = 1e-2
    joint: JointConfig = field(default_factory=lambda: JointConfig(
        K=4, refresh_every=200, batch_size=16, lr_generator=3e-3, lr_retriever=1e-3, max_steps=2000))
    loss_eval_steps: tuple[int, ...] = (50, 500, 1000, 1500, 2000)
    decode_contexts: int = 200
    decode_ks: tuple[int, ...] = (1, 2, 3, 4)
    backward_steps: int = 1000
    mmi_contexts: int = 100
    retriever_only_steps: int = 600
    retriever_only_eval_every: int = 100
    retriever_only_lr: float = 1e-3


def split_examples(examples, n_valid: int, seed: int):
    """Random held-out slice of ``n_valid`` examples; the rest is training data."""
    order = np.random.default_rng(seed).permutation(len(examples))
    return [examples[i] for i in order[n_valid:]], [examples[i] for i in order[:n_valid]]


def _kmr_oracle(hyps, exs, store, stop):
    return corpus_kmr([h for h in hyps], [ex.context for ex in exs],
                      [[store[ex.oracle_doc_id].text] for ex in exs], stop)


def validation_loss(generator: GroundedLM, retriever: DualEncoder, store, examples, K: int) -> float:
    """Mean top-K marginal NLL with exhaustive retrieval on fresh embeddings."""
    emb = retriever.embed_store(store)
    hx = retriever.encode_queries([ex.context for ex in examples]).data
    total = 0.0
    for s in range(0, len(examples), 16):
        part, rows = examples[s:s + 16], hx[s:s + 16] @ emb.T
        layouts, scores = [], []
        for ex, row in zip(part, rows):
            top = np.argsort(-row, kind="stable")[:K]
            scores.append(row[top])
            layouts.extend(generator.layout(store[store.ids[j]].text, ex.context, with_eos(ex.target)) for j in top)
        logr = generator.sequence_log_probs(layouts).data.reshape(len(part), K)
        total += float(marginal_nll_from(logr, np.array(scores)).data.sum())
    return total / len(examples)


def _topk(retriever, store, ex, K):
    emb = retriever.embed_store(store)
    row = emb @ retriever.encode_query(ex.context).data
    top = np.argsort(-row, kind="stable")[:K]
    s = row[top]
    p = np.exp(s - s.max())
    return [store.ids[j] for j in top], p / p.sum()


def run_grounded_copy(seed: int, cfg: ExperimentConfig | None = None) -> dict:
    cfg = cfg or ExperimentConfig()
    t_start = time.perf_counter()
    corpus = make_synthetic_grounded_corpus(cfg.synthetic, seed)
    vocab = build_vocab_from_texts([d["text"] for d in corpus.documents] + [e["context"] for e in corpus.examples])
    store = documents_from_records(corpus.documents, vocab)
    examples = examples_from_records(corpus.examples, vocab)
    train, valid = split_examples(examples, cfg.n_valid, seed)
    stop = build_stopwords(None, ([vocab.itos[t] for t in d.text] for d in store), 1.0)
    stop_ids = {vocab.id(w) for w in stop if w in vocab}

    gcfg = GeneratorConfig(len(vocab), dim=cfg.gen_dim, layers=cfg.gen_layers, heads=cfg.gen_heads)
    retriever = DualEncoder(RetrieverConfig(len(vocab), dim=cfg.ret_dim), seed=seed)
    out: dict = {"seed": seed}
    out["recall1_random"] = recall_at_k(retriever, store, valid, 1).recall
    warm_start_retriever(retriever, train, store, cfg.warm_start_steps, lr=cfg.warm_start_lr, seed=seed)
    out["recall1_warm"] = recall_at_k(retriever, store, valid, 1).recall
    warm = copy.deepcopy(retriever)

    def train_run(freeze_retriever: bool):
        gen = GroundedLM(gcfg, seed=seed)
        ret = copy.deepcopy(warm)
        jc = JointConfig(**{**asdict(cfg.joint), "seed": seed, "freeze_retriever": freeze_retriever})
        trainer = JointTrainer(gen, ret, store, jc)
        curve, t0 = [], time.perf_counter()
        for step in range(1, jc.max_steps + 1):
            trainer.train_step(trainer.sample_batch(train))
            if step in cfg.loss_eval_steps:
                curve.append((step, validation_loss(gen, ret, store, valid, jc.K)))
        return gen, ret, curve, time.perf_counter() - t0

    gen_joint, ret_joint, out["val_loss_joint"], out["time_joint"] = train_run(False)
    gen_fixed, ret_fixed, out["val_loss_fixed"], out["time_fixed"] = train_run(True)
    out["recall1_joint"] = recall_at_k(ret_joint, store, valid, 1).recall
    out["recall1_fixed"] = recall_at_k(ret_fixed, store, valid, 1).recall
    out["recall4_joint"] = recall_at_k(ret_joint, store, valid, 4).recall

    baseline = GroundedLM(gcfg, seed=seed)
    t0 = time.perf_counter()
    train_no_retrieval_baseline(baseline, train, cfg.joint.max_steps, lr=cfg.joint.lr_generator,
                                batch_size=cfg.joint.batch_size, seed=seed)
    out["time_baseline"] = time.perf_counter() - t0

    # decoding
    dec_exs = valid[:cfg.decode_contexts]
    max_len = cfg.synthetic.fact_len + 2
    kmr_by_k, kmr_pool_by_k = {}, {}
    for K in cfg.decode_ks:
        dcfg = DecodeConfig(K=K, max_len=max_len)
        hyps, pooled = [], []
        for ex in dec_exs:
            ids, probs = _topk(ret_joint, store, ex, K)
            docs = [store[i].text for i in ids]
            h = decode_with_docs(gen_joint, ex.context, docs, probs, dcfg)
            hyps.append(h.tokens)
            pooled.append(docs)
        kmr_by_k[K] = _kmr_oracle(hyps, dec_exs, store, stop_ids).value
        kmr_pool_by_k[K] = corpus_kmr(hyps, [ex.context for ex in dec_exs], pooled, stop_ids).value
    out["kmr_by_k"] = kmr_by_k
    out["kmr_pooled_by_k"] = kmr_pool_by_k
    base_hyps = [decode_with_docs(baseline, ex.context, [[]], [1.0], DecodeConfig(K=1, max_len=max_len)).tokens
                 for ex in dec_exs]
    out["kmr_baseline"] = _kmr_oracle(base_hyps, dec_exs, store, stop_ids).value

    # MMI direction check
    bcfg = GeneratorConfig(len(vocab), dim=cfg.gen_dim, layers=cfg.gen_layers, heads=cfg.gen_heads,
                           doc_cap=max(gcfg.max_target, 16), max_context=gcfg.doc_cap + gcfg.max_context + 1)
    backward = GroundedLM(bcfg, seed=seed + 1000, prefix="bwd.")
    t0 = time.perf_counter()
    train_backward_model(backward, train, store, cfg.backward_steps, lr=cfg.joint.lr_generator,
                         batch_size=cfg.joint.batch_size, seed=seed)
    rng = np.random.default_rng(seed + 7)
    words = np.arange(len(RESERVED), len(vocab))
    wins = 0
    mmi_exs = valid[:cfg.mmi_contexts]
    for ex in mmi_exs:
        ids, _ = _topk(ret_joint, store, ex, cfg.joint.K)
        docs = [store[i].text for i in ids]
        fact = Hypothesis(list(ex.target), 0.0)
        rand = Hypothesis(rng.choice(words, size=len(ex.target)).tolist(), 0.0)
        ranked = mmi_rerank(ex.context, docs, [rand, fact], backward)
        wins += ranked[0] is fact
    out["mmi_win_rate"] = wins / len(mmi_exs)
    out["time_mmi"] = time.perf_counter() - t0

    # retriever-only curve against the frozen-retriever generator
    t0 = time.perf_counter()
    jc = JointConfig(**{**asdict(cfg.joint), "seed": seed, "lr_retriever": cfg.retriever_only_lr})
    out["retriever_only_curve"] = retriever_only_training(
        gen_fixed, copy.deepcopy(warm), store, train, valid, jc, cfg.retriever_only_steps,
        cfg.retriever_only_eval_every)
    out["time_retriever_only"] = time.perf_counter() - t0
    out["time_total"] = time.perf_counter() - t_start
    return out

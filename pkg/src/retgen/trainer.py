"""Joint retriever + generator training on the top-K marginal likelihood."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .generator import GroundedLM
from .optim import AdamState, adam_step
from .retriever import DualEncoder, EmbeddingIndex, RetrievalResult, batch_scores, build_index, refresh_if_due, retrieve
from .text import EOS_ID, CorpusExample, DocumentStore

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class JointConfig:
    K: int = 4
    refresh_every: int = 200
    batch_size: int = 16
    lr_generator: float = 1e-3
    lr_retriever: float = 1e-4
    max_steps: int = 2000
    seed: int = 0
    control_variate: str = "expected_reward"
    retriever_update: str = "autodiff"
    retrieval_mode: str = "lsh"
    freeze_retriever: bool = False
    freeze_generator: bool = False
    index_tables: int = 16
    index_bits: int = 8
    eval_every: int = 0
    dump_path: str | None = None

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.refresh_every < 1:
            raise ValueError("refresh period must be >= 1")
        if self.control_variate not in ("expected_reward", "zero"):
            raise ValueError(f"unknown control variate mode {self.control_variate!r}")
        if self.retriever_update not in ("autodiff", "ac"):
            raise ValueError(f"unknown retriever update {self.retriever_update!r}")


@dataclass
class RewardRecord:
    rewards: np.ndarray
    probs: np.ndarray
    baseline: float
    marginal: float


def with_eos(y: Sequence[int]) -> list[int]:
    return [*y, EOS_ID]


# ---------------------------------------------------------------------------
# losses and estimators


def marginal_nll_from(log_rewards, scores) -> ad.Tensor:
    """``-log sum_k exp(log_rewards_k) softmax_k(scores)``, batched over leading axes."""
    log_rewards, scores = ad.as_tensor(log_rewards), ad.as_tensor(scores)
    if log_rewards.shape != scores.shape:
        raise ad.ShapeError(f"rewards {log_rewards.shape} vs scores {scores.shape}")
    lr = log_rewards.data
    if np.any(np.all(np.isneginf(lr), axis=-1)):
        raise FloatingPointError("every retrieved document gives p(y|x,z) = 0; marginal is log(0)")
    return ad.neg(ad.logsumexp(ad.add(log_rewards, ad.log_softmax(scores, axis=-1)), axis=-1))


def marginal_nll(generator: GroundedLM, store: DocumentStore, x, y, retrieval: RetrievalResult,
                 scores=None) -> ad.Tensor:
    """Top-K marginal loss for one example.

    ``scores`` defaults to the retrieval's (constant) scores; pass a tensor
    built from the encoder to differentiate through the retriever.
    """
    docs = [store[i].text for i in retrieval.doc_ids]
    logr = generator.sequence_log_probs([generator.layout(z, x, y) for z in docs])
    s = retrieval.scores if scores is None else scores
    return marginal_nll_from(logr, s)


def reward_record(generator: GroundedLM, store: DocumentStore, x, y, retrieval: RetrievalResult,
                  mode: str = "expected_reward") -> RewardRecord:
    docs = [store[i].text for i in retrieval.doc_ids]
    logr = generator.sequence_log_probs([generator.layout(z, x, y) for z in docs]).data
    r = np.exp(logr)
    p = np.asarray(retrieval.probs)
    marginal = float(r @ p)
    return RewardRecord(r, p, marginal if mode == "expected_reward" else 0.0, marginal)


def _scores_tensor(retriever: DualEncoder, x, docs) -> ad.Tensor:
    hx = retriever.encode_queries([x])
    hz = retriever.encode_documents(docs)
    return ad.reshape(ad.matmul(hz, ad.reshape(hx, (retriever.config.dim, 1))), (len(docs),))


def retriever_grad_ac(retriever: DualEncoder, x, docs: Sequence[Sequence[int]], rewards,
                      baseline="expected_reward") -> dict[str, np.ndarray]:
    """Score-function estimate of the gradient of p(y|x) w.r.t. the retriever.

    ``sum_k (r_k - C) p_k grad log p_k`` over the fixed top-K set, with the
    rewards r_k = p(y|x,z_k) held constant.  ``baseline`` is a number or one
    of ``"expected_reward"`` / ``"zero"``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    with ad.Tape() as tape:
        s = _scores_tensor(retriever, x, docs)
        logp = ad.log_softmax(s)
        p = np.exp(logp.data)
        if baseline == "expected_reward":
            C = float(r @ p)
        elif baseline == "zero":
            C = 0.0
        else:
            C = float(baseline)
        surrogate = ad.tsum(ad.mul(logp, (r - C) * p))
    return ad.backward(surrogate, tape, retriever.parameters())


def retriever_grad_autodiff(retriever: DualEncoder, x, docs, rewards) -> dict[str, np.ndarray]:
    """Direct gradient of ``sum_k r_k softmax_k(s)`` (the fixed-K marginal)."""
    r = np.asarray(rewards, dtype=np.float64)
    with ad.Tape() as tape:
        s = _scores_tensor(retriever, x, docs)
        marginal = ad.tsum(ad.mul(ad.softmax(s), r))
    return ad.backward(marginal, tape, retriever.parameters())


# ---------------------------------------------------------------------------
# warm start


def warm_start_retriever(retriever: DualEncoder, examples: Sequence[CorpusExample], store: DocumentStore,
                         steps: int, lr: float = 1e-2, batch_size: int = 16, seed: int = 0) -> list[float]:
    """In-batch softmax contrastive alignment of queries with their oracle documents."""
    pairs = [ex for ex in examples if ex.oracle_doc_id is not None and ex.oracle_doc_id in store]
    if not pairs:
        raise ValueError("warm start needs examples with oracle document ids")
    rng = np.random.default_rng(seed)
    state = AdamState(lr=lr)
    params = retriever.parameters()
    losses = []
    for _ in range(steps):
        batch = [pairs[i] for i in rng.choice(len(pairs), size=min(batch_size, len(pairs)), replace=False)]
        doc_ids = sorted({ex.oracle_doc_id for ex in batch})
        target = np.array([doc_ids.index(ex.oracle_doc_id) for ex in batch])
        with ad.Tape() as tape:
            hx = retriever.encode_queries([ex.context for ex in batch])
            hz = retriever.encode_documents([store[i].text for i in doc_ids])
            logits = ad.matmul(hx, ad.transpose(hz, (1, 0)))
            loss = ad.mean(ad.cross_entropy(logits, target))
        adam_step(params, ad.backward(loss, tape, params), state)
        losses.append(loss.item())
    return losses


# ---------------------------------------------------------------------------
# joint trainer


class JointTrainer:
    def __init__(self, generator: GroundedLM, retriever: DualEncoder, store: DocumentStore,
                 config: JointConfig, index: EmbeddingIndex | None = None):
        self.generator = generator
        self.retriever = retriever
        self.store = store
        self.config = config
        self.step = 0
        self.rng = np.random.default_rng(config.seed)
        self.opt_gen = AdamState(lr=config.lr_generator)
        self.opt_ret = AdamState(lr=config.lr_retriever)
        generator.freeze(config.freeze_generator)
        retriever.freeze(config.freeze_retriever)
        self.index = index if index is not None else build_index(
            store, retriever, config.index_tables, config.index_bits, config.seed)

    def retrieve_batch(self, batch: Sequence[CorpusExample]) -> list[list[str]]:
        hx = self.retriever.encode_queries([ex.context for ex in batch]).data
        return [retrieve(self.index, h, self.config.K, self.config.retrieval_mode).doc_ids for h in hx]

    def _forward(self, batch, doc_ids):
        c = self.config
        B, K = len(batch), c.K
        hx = self.retriever.encode_queries([ex.context for ex in batch])
        hz = self.retriever.encode_documents([self.store[i].text for ids in doc_ids for i in ids])
        scores = batch_scores(hx, ad.reshape(hz, (B, K, self.retriever.config.dim)))
        layouts = [
            self.generator.layout(self.store[i].text, ex.context, with_eos(ex.target))
            for ex, ids in zip(batch, doc_ids) for i in ids
        ]
        logr = ad.reshape(self.generator.sequence_log_probs(layouts), (B, K))
        return scores, logr

    def train_step(self, batch: Sequence[CorpusExample]) -> dict:
        c = self.config
        t0 = time.perf_counter()
        doc_ids = self.retrieve_batch(batch)
        B = len(batch)
        with ad.Tape() as tape:
            scores, logr = self._forward(batch, doc_ids)
            if c.retriever_update == "autodiff":
                per_ex = marginal_nll_from(logr, scores)
                loss = ad.mean(per_ex)
                objective = loss
            else:
                per_ex = marginal_nll_from(logr, ad.Tensor(scores.data))
                loss = ad.mean(per_ex)
                objective = ad.add(loss, self._ac_surrogate(scores, logr.data, per_ex.data))
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            self._dump(batch, doc_ids, scores.data, logr.data)
            raise TrainingDiverged(f"non-finite loss {loss_val} at step {self.step}")
        params = [p for p in self.generator.parameters() + self.retriever.parameters() if p.requires_grad]
        grads = ad.backward(objective, tape, params) if params else {}
        if not c.freeze_generator:
            adam_step(self.generator.parameters(), grads, self.opt_gen)
        if not c.freeze_retriever:
            adam_step(self.retriever.parameters(), grads, self.opt_ret)
        self.step += 1
        if not c.freeze_retriever:
            self.index = refresh_if_due(self.index, self.step, c.refresh_every, self.store, self.retriever)
        return {
            "step": self.step,
            "loss": loss_val,
            "expected_reward": float(np.mean(np.exp(-per_ex.data))),
            "step_time": time.perf_counter() - t0,
        }

    def _ac_surrogate(self, scores: ad.Tensor, logr: np.ndarray, nll: np.ndarray) -> ad.Tensor:
        """Surrogate whose retriever gradient is the scaled estimator.

        grad(-log p) = -(sum_k (r_k - C) p_k grad log p_k) / p, with the
        weights computed in log space: r_k p_k / p is the posterior over
        documents and C / p is 1 for the expected-reward baseline.
        """
        logp = ad.log_softmax(scores, axis=-1)
        p = np.exp(logp.data)
        joint = logr + logp.data
        posterior = np.exp(joint - (-nll)[:, None])
        c_over_p = 1.0 if self.config.control_variate == "expected_reward" else 0.0
        w = posterior - c_over_p * p
        return ad.mul(ad.tsum(ad.mul(logp, w)), -1.0 / len(nll))

    def _dump(self, batch, doc_ids, scores, logr) -> None:
        record = {
            "step": self.step,
            "examples": [ex.id for ex in batch],
            "doc_ids": doc_ids,
            "scores": scores.tolist(),
            "log_rewards": logr.tolist(),
        }
        log.error("training diverged: %s", json.dumps(record)[:2000])
        if self.config.dump_path:
            from .checkpoint import atomic_write_text

            atomic_write_text(self.config.dump_path, json.dumps(record))

    def sample_batch(self, examples: Sequence[CorpusExample]) -> list[CorpusExample]:
        n = min(self.config.batch_size, len(examples))
        return [examples[i] for i in self.rng.choice(len(examples), size=n, replace=False)]

    def fit(self, examples: Sequence[CorpusExample], steps: int,
            on_eval: Callable[["JointTrainer"], dict] | None = None) -> list[dict]:
        history = []
        for _ in range(steps):
            rec = self.train_step(self.sample_batch(examples))
            if on_eval is not None and self.config.eval_every and self.step % self.config.eval_every == 0:
                rec.update(on_eval(self))
            history.append(rec)
        return history


# ---------------------------------------------------------------------------
# evaluation helpers shared by retriever-only training


def expected_reward(generator: GroundedLM, retriever: DualEncoder, store: DocumentStore,
                    examples: Sequence[CorpusExample], K: int, chunk: int = 16) -> float:
    """Mean of sum_k p(y|x,z_k) p(z_k|x) over exhaustive top-K with fresh embeddings."""
    emb = retriever.embed_store(store)
    ids = store.ids
    total = 0.0
    for s in range(0, len(examples), chunk):
        part = examples[s:s + chunk]
        hx = retriever.encode_queries([ex.context for ex in part]).data
        sc = hx @ emb.T
        layouts, probs = [], []
        for ex, row in zip(part, sc):
            top = np.argsort(-row, kind="stable")[:K]
            s_top = row[top]
            p = np.exp(s_top - s_top.max())
            probs.append(p / p.sum())
            layouts.extend(generator.layout(store[ids[j]].text, ex.context, with_eos(ex.target)) for j in top)
        logr = generator.sequence_log_probs(layouts).data.reshape(len(part), K)
        total += float((np.exp(logr) * np.array(probs)).sum())
    return total / len(examples)


def retriever_only_training(generator: GroundedLM, retriever: DualEncoder, store: DocumentStore,
                            train: Sequence[CorpusExample], valid: Sequence[CorpusExample],
                            config: JointConfig, steps: int, eval_every: int = 100,
                            recall_k: int = 1) -> list[dict]:
    """Fine-tune only the retriever against a frozen generator, tracking a curve.

    Each point has ``step``, ``expected_reward`` and, when the validation
    examples carry oracle ids, ``recall``.
    """
    from .metrics import recall_at_k

    cfg = JointConfig(**{**asdict(config), "freeze_generator": True, "freeze_retriever": False})
    trainer = JointTrainer(generator, retriever, store, cfg)

    def point() -> dict:
        rec = {"step": trainer.step,
               "expected_reward": expected_reward(generator, retriever, store, valid, cfg.K)}
        if any(ex.oracle_doc_id for ex in valid):
            rec["recall"] = recall_at_k(retriever, store, valid, recall_k).recall
        return rec

    curve = [point()]
    for _ in range(steps):
        trainer.train_step(trainer.sample_batch(train))
        if trainer.step % eval_every == 0:
            curve.append(point())
    return curve


# ---------------------------------------------------------------------------
# single-model fitting (no-retrieval baseline, backward MMI model)


def fit_sequences(model: GroundedLM, make_layout: Callable[[CorpusExample], object],
                  examples: Sequence[CorpusExample], steps: int, lr: float = 1e-3,
                  batch_size: int = 16, seed: int = 0) -> list[float]:
    """Plain maximum likelihood on one layout per example."""
    rng = np.random.default_rng(seed)
    state = AdamState(lr=lr)
    params = model.parameters()
    losses = []
    for _ in range(steps):
        batch = [examples[i] for i in rng.choice(len(examples), size=min(batch_size, len(examples)), replace=False)]
        with ad.Tape() as tape:
            lp = model.sequence_log_probs([make_layout(ex) for ex in batch])
            loss = ad.neg(ad.mean(lp))
        adam_step(params, ad.backward(loss, tape, params), state)
        losses.append(loss.item())
    return losses


def train_no_retrieval_baseline(model: GroundedLM, examples, steps, **kw) -> list[float]:
    return fit_sequences(model, lambda ex: model.layout((), ex.context, with_eos(ex.target)), examples, steps, **kw)


def train_backward_model(model: GroundedLM, examples, store: DocumentStore, steps, **kw) -> list[float]:
    """Fit log p(z, x | y) on oracle documents."""
    usable = [ex for ex in examples if ex.oracle_doc_id in store]
    if not usable:
        raise ValueError("backward model training needs oracle document ids")
    return fit_sequences(
        model, lambda ex: model.backward_layout(store[ex.oracle_doc_id].text, ex.context, ex.target),
        usable, steps, **kw)

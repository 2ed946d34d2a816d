"""Dual-encoder retriever and an LSH index for maximum inner product search.

Documents are scaled by the largest norm in the collection and given an
extra coordinate ``sqrt(1 - |v|^2)``; queries are unit-normalised with a zero
extra coordinate.  Angles between the augmented vectors then order documents
by inner product, so random-hyperplane signatures can bucket them.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import load_arrays, save_arrays
from .layers import Module, normal
from .text import DocumentStore

log = logging.getLogger(__name__)


@dataclass
class RetrieverConfig:
    vocab_size: int
    dim: int = 32
    embed_dim: int = 32
    init_std: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


class DualEncoder(Module):
    """Mean-pooled token embeddings followed by a linear map, one tower per side."""

    def __init__(self, config: RetrieverConfig, seed: int = 0, prefix: str = "ret."):
        super().__init__(prefix)
        self.config = c = config
        rng = np.random.default_rng(seed)
        self.q_emb = self.param("q_emb", normal(rng, (c.vocab_size, c.embed_dim), c.init_std))
        self.q_proj = self.param("q_proj", normal(rng, (c.embed_dim, c.dim), 1.0 / np.sqrt(c.embed_dim)))
        self.d_emb = self.param("d_emb", normal(rng, (c.vocab_size, c.embed_dim), c.init_std))
        self.d_proj = self.param("d_proj", normal(rng, (c.embed_dim, c.dim), 1.0 / np.sqrt(c.embed_dim)))

    def _encode(self, seqs: Sequence[Sequence[int]], emb, proj) -> ad.Tensor:
        if not seqs:
            raise ValueError("nothing to encode")
        for s in seqs:
            if len(s) == 0:
                raise ValueError("cannot encode an empty token sequence")
        T = max(len(s) for s in seqs)
        ids = np.zeros((len(seqs), T), dtype=np.int64)
        w = np.zeros((len(seqs), 1, T))
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = s
            w[i, 0, :len(s)] = 1.0 / len(s)
        pooled = ad.matmul(w, ad.embedding(emb, ids))  # (B, 1, E)
        return ad.matmul(ad.reshape(pooled, (len(seqs), self.config.embed_dim)), proj)

    def encode_queries(self, xs: Sequence[Sequence[int]]) -> ad.Tensor:
        return self._encode(xs, self.q_emb, self.q_proj)

    def encode_documents(self, zs: Sequence[Sequence[int]]) -> ad.Tensor:
        return self._encode(zs, self.d_emb, self.d_proj)

    def encode_query(self, x: Sequence[int]) -> ad.Tensor:
        return self.encode_queries([x]).reshape(self.config.dim)

    def encode_document(self, z: Sequence[int]) -> ad.Tensor:
        return self.encode_documents([z]).reshape(self.config.dim)

    def embed_store(self, store: DocumentStore, ids: Sequence[str] | None = None,
                    chunk: int = 512) -> np.ndarray:
        ids = list(store.ids if ids is None else ids)
        out = [self.encode_documents([store[i].text for i in ids[s:s + chunk]]).data
               for s in range(0, len(ids), chunk)]
        return np.concatenate(out, axis=0)


def score(h_x, h_z):
    """Inner product relevance ``h_x . h_z``; differentiable for tensors."""
    if isinstance(h_x, ad.Tensor) or isinstance(h_z, ad.Tensor):
        h_x, h_z = ad.as_tensor(h_x), ad.as_tensor(h_z)
        if h_x.shape != h_z.shape:
            raise ad.ShapeError(f"score: dimension mismatch {h_x.shape} vs {h_z.shape}")
        return ad.tsum(ad.mul(h_x, h_z))
    a, b = np.asarray(h_x, dtype=np.float64), np.asarray(h_z, dtype=np.float64)
    if a.shape != b.shape:
        raise ad.ShapeError(f"score: dimension mismatch {a.shape} vs {b.shape}")
    return float(a @ b)


def batch_scores(h_x: ad.Tensor, h_z: ad.Tensor) -> ad.Tensor:
    """Scores for B queries against their own K documents: (B,d) x (B,K,d) -> (B,K)."""
    B, d = h_x.shape
    return ad.reshape(ad.matmul(h_z, ad.reshape(h_x, (B, d, 1))), (B, h_z.shape[1]))


# ---------------------------------------------------------------------------
# index


@dataclass
class RetrievalResult:
    doc_ids: list[str]
    scores: np.ndarray
    probs: np.ndarray
    candidates: int = 0


def _softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max())
    return e / e.sum()


class EmbeddingIndex:
    def __init__(self, doc_ids, embeddings, hyperplanes, seed, snapshot_step=0, probe_radius=1):
        order = np.argsort(np.asarray(doc_ids, dtype=object), kind="stable")
        self.doc_ids: list[str] = [doc_ids[i] for i in order]
        self.embeddings = np.asarray(embeddings, dtype=np.float64)[order]
        self.hyperplanes = np.asarray(hyperplanes, dtype=np.float64)  # (L, b, d+1)
        self.seed = seed
        self.snapshot_step = snapshot_step
        self.probe_radius = probe_radius
        self.codes = self._hash(self._augment_docs(self.embeddings))  # (L, N)
        self.tables: list[dict[int, np.ndarray]] = []
        for codes in self.codes:
            table: dict[int, list[int]] = {}
            for pos, c in enumerate(codes):
                table.setdefault(int(c), []).append(pos)
            self.tables.append({k: np.array(v) for k, v in table.items()})

    @property
    def n_tables(self) -> int:
        return self.hyperplanes.shape[0]

    @property
    def n_bits(self) -> int:
        return self.hyperplanes.shape[1]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return len(self.doc_ids)

    @staticmethod
    def _augment_docs(v: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(v, axis=1)
        scale = norms.max() if norms.size and norms.max() > 0 else 1.0
        u = v / scale
        extra = np.sqrt(np.clip(1.0 - (u * u).sum(axis=1), 0.0, None))
        return np.hstack([u, extra[:, None]])

    @staticmethod
    def _augment_query(q: np.ndarray) -> np.ndarray:
        n = np.linalg.norm(q)
        return np.append(q / n if n > 0 else q, 0.0)

    def _hash(self, aug: np.ndarray) -> np.ndarray:
        bits = np.einsum("lbd,nd->lnb", self.hyperplanes, aug) > 0
        weights = 1 << np.arange(self.n_bits, dtype=np.int64)
        return (bits.astype(np.int64) * weights).sum(axis=-1)

    def _probe_codes(self, code: int) -> list[int]:
        codes = [code]
        for r in range(1, self.probe_radius + 1):
            for flip in itertools.combinations(range(self.n_bits), r):
                c = code
                for bit in flip:
                    c ^= 1 << bit
                codes.append(c)
        return codes

    def candidates(self, h_x: np.ndarray, n_tables: int | None = None) -> np.ndarray:
        """Positions of documents sharing a probed bucket with the query."""
        L = self.n_tables if n_tables is None else n_tables
        q = self._augment_query(np.asarray(h_x, dtype=np.float64))
        qcodes = self._hash(q[None, :])[:L, 0]
        found = set()
        for table, code in zip(self.tables[:L], qcodes):
            for c in self._probe_codes(int(code)):
                hit = table.get(c)
                if hit is not None:
                    found.update(hit.tolist())
        return np.array(sorted(found), dtype=np.int64)


def build_index(store_or_ids, encoder_or_embeddings, L: int = 16, b: int = 8, seed: int = 0,
                snapshot_step: int = 0, probe_radius: int = 1) -> EmbeddingIndex:
    """Embed every document and hash it into ``L`` tables of ``b``-bit signatures.

    Accepts either a (DocumentStore, DualEncoder) pair or raw (ids, embeddings).
    """
    if L < 1 or b < 1:
        raise ValueError(f"need L >= 1 and b >= 1, got L={L}, b={b}")
    if b > 62:
        raise ValueError("b must be at most 62")
    if isinstance(store_or_ids, DocumentStore):
        ids = list(store_or_ids.ids)
        if not ids:
            raise ValueError("cannot index an empty document store")
        emb = encoder_or_embeddings.embed_store(store_or_ids)
    else:
        ids = [str(i) for i in store_or_ids]
        emb = np.asarray(encoder_or_embeddings, dtype=np.float64)
        if not ids:
            raise ValueError("cannot index an empty document store")
    rng = np.random.default_rng(seed)
    planes = rng.standard_normal((L, b, emb.shape[1] + 1))
    return EmbeddingIndex(ids, emb, planes, seed, snapshot_step, probe_radius)


def retrieve(index: EmbeddingIndex, h_x, K: int, mode: str = "lsh",
             encoder: DualEncoder | None = None, store: DocumentStore | None = None) -> RetrievalResult:
    """Top-K documents by inner product.

    Candidates come from the index snapshot.  When ``encoder`` and ``store``
    are given, the K selected documents are re-scored with the current
    encoder so the reported scores are never stale.
    """
    if mode not in ("lsh", "exhaustive"):
        raise ValueError(f"unknown retrieval mode {mode!r}")
    if K < 1 or K > len(index):
        raise ValueError(f"K={K} must be in [1, {len(index)}]")
    h = np.asarray(h_x.data if isinstance(h_x, ad.Tensor) else h_x, dtype=np.float64)
    if h.shape != (index.dim,):
        raise ad.ShapeError(f"query dim {h.shape} vs index dim {index.dim}")
    pos = None
    if mode == "lsh":
        pos = index.candidates(h)
        if len(pos) < K:
            pos = None
    if pos is None:
        pos = np.arange(len(index))
    s = index.embeddings[pos] @ h
    top = pos[np.argsort(-s, kind="stable")[:K]]
    ids = [index.doc_ids[i] for i in top]
    if encoder is not None and store is not None:
        fresh = encoder.embed_store(store, ids) @ h
        order = np.lexsort((np.arange(K), -fresh))
        ids = [ids[i] for i in order]
        scores = fresh[order]
    else:
        scores = index.embeddings[top] @ h
    return RetrievalResult(ids, scores, _softmax(scores), candidates=len(pos))


def exhaustive_top_k(embeddings: np.ndarray, h_x: np.ndarray, K: int) -> np.ndarray:
    s = embeddings @ h_x
    return np.argsort(-s, kind="stable")[:K]


def refresh_if_due(index: EmbeddingIndex, current_step: int, M: int,
                   store: DocumentStore | None = None, encoder: DualEncoder | None = None) -> EmbeddingIndex:
    """Rebuild the index once ``M`` steps have passed since its snapshot.

    The old index is left untouched and a new one is returned, so readers
    holding the old reference keep a consistent view.
    """
    if M < 1:
        raise ValueError("refresh period M must be >= 1")
    if current_step - index.snapshot_step < M:
        return index
    if store is None or encoder is None:
        raise ValueError("refresh needs the document store and encoder")
    ids = list(store.ids)
    emb = encoder.embed_store(store, ids)
    return EmbeddingIndex(ids, emb, index.hyperplanes, index.seed, current_step, index.probe_radius)


def save_index(path, index: EmbeddingIndex, meta: dict | None = None) -> None:
    save_arrays(
        path,
        {"embeddings": index.embeddings, "hyperplanes": index.hyperplanes, "codes": index.codes},
        {
            "kind": "index",
            "doc_ids": index.doc_ids,
            "dim": index.dim,
            "tables": index.n_tables,
            "bits": index.n_bits,
            "seed": index.seed,
            "snapshot_step": index.snapshot_step,
            "probe_radius": index.probe_radius,
            **(meta or {}),
        },
    )


def load_index(path) -> EmbeddingIndex:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "index":
        raise ValueError(f"{path} is not an index file")
    idx = EmbeddingIndex(meta["doc_ids"], arrays["embeddings"], arrays["hyperplanes"], meta["seed"],
                         meta["snapshot_step"], meta.get("probe_radius", 1))
    if not np.array_equal(idx.codes, arrays["codes"]):
        raise ValueError(f"{path}: stored hash codes disagree with hyperplanes")
    return idx

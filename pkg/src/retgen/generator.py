"""Document-grounded decoder-only transformer.

Input layout for one (z, x, y) triple::

    tokens     z_0 ... z_n   <sep>      x_0 ... x_m   y_0 ... y_k
    positions  P ... P+n     P+n+1      0 ... m       m+1 ... m+k+1
    types      1 ... 1       0          0 ... 0       0 ... 0

where ``P`` is the document position offset.  A plain causal mask over the
whole row lets context and target attend to the document while document
tokens only see earlier document tokens.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .layers import Module, linear, normal
from .text import PAD_ID, SEP_ID


class LayoutError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    vocab_size: int
    dim: int = 64
    layers: int = 2
    heads: int = 2
    doc_pos_offset: int = 64
    doc_cap: int = 24
    max_context: int = 32
    max_target: int = 16
    max_positions: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        need = max(self.doc_pos_offset + self.doc_cap + 1, self.max_context + self.max_target + 1)
        if not self.max_positions:
            self.max_positions = need
        if self.max_positions < self.doc_pos_offset + self.doc_cap + 1:
            raise ValueError("max_positions must cover doc_pos_offset + doc_cap + 1")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InputLayout:
    tokens: np.ndarray
    positions: np.ndarray
    types: np.ndarray
    target_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)


def layout_input(
    z: Sequence[int],
    x: Sequence[int],
    y_prefix: Sequence[int] = (),
    doc_pos_offset: int = 400,
    max_positions: int | None = None,
    score_mask: Sequence[bool] | None = None,
) -> InputLayout:
    """Lay out ``[z <sep> x y]`` with offset document positions and type ids.

    ``target_mask`` marks the y tokens (optionally restricted by
    ``score_mask``, one flag per y token).
    """
    nz, nx, ny = len(z), len(x), len(y_prefix)
    doc_pos = np.arange(doc_pos_offset, doc_pos_offset + nz + 1)
    ctx_pos = np.arange(nx + ny)
    if max_positions is not None:
        top = max(doc_pos[-1], ctx_pos[-1] if len(ctx_pos) else 0)
        if top >= max_positions:
            raise LayoutError(
                f"layout needs position {top} but the model has {max_positions} positions "
                f"(|z|={nz}, |x|={nx}, |y|={ny})"
            )
    tokens = np.array([*z, SEP_ID, *x, *y_prefix], dtype=np.int64)
    positions = np.concatenate([doc_pos, ctx_pos]).astype(np.int64)
    types = np.zeros(len(tokens), dtype=np.int64)
    types[:nz] = 1
    mask = np.zeros(len(tokens), dtype=bool)
    if score_mask is None:
        mask[nz + 1 + nx:] = True
    else:
        if len(score_mask) != ny:
            raise LayoutError("score_mask must have one flag per target token")
        mask[nz + 1 + nx:] = np.asarray(score_mask, dtype=bool)
    return InputLayout(tokens, positions, types, mask)


@dataclass
class _Batch:
    tokens: np.ndarray
    positions: np.ndarray
    types: np.ndarray
    lengths: np.ndarray


def _pad(layouts: Sequence[InputLayout]) -> _Batch:
    T = max(len(l) for l in layouts)
    B = len(layouts)
    tokens = np.full((B, T), PAD_ID, dtype=np.int64)
    positions = np.zeros((B, T), dtype=np.int64)
    types = np.zeros((B, T), dtype=np.int64)
    for i, l in enumerate(layouts):
        n = len(l)
        tokens[i, :n] = l.tokens
        positions[i, :n] = l.positions
        types[i, :n] = l.types
    return _Batch(tokens, positions, types, np.array([len(l) for l in layouts]))


class GroundedLM(Module):
    def __init__(self, config: GeneratorConfig, seed: int = 0, prefix: str = "gen."):
        super().__init__(prefix)
        self.config = c = config
        rng = np.random.default_rng(seed)
        s = c.init_std
        d = c.dim
        self.tok_emb = self.param("tok_emb", normal(rng, (c.vocab_size, d), s))
        self.pos_emb = self.param("pos_emb", normal(rng, (c.max_positions, d), s))
        self.type_emb = self.param("type_emb", normal(rng, (2, d), s))
        self.blocks = []
        proj_std = s / math.sqrt(2 * c.layers)
        for i in range(c.layers):
            p = f"h{i}."
            self.blocks.append({
                "ln1_g": self.param(p + "ln1_g", np.ones(d)),
                "ln1_b": self.param(p + "ln1_b", np.zeros(d)),
                "w_qkv": self.param(p + "w_qkv", normal(rng, (d, 3 * d), s)),
                "b_qkv": self.param(p + "b_qkv", np.zeros(3 * d)),
                "w_o": self.param(p + "w_o", normal(rng, (d, d), proj_std)),
                "b_o": self.param(p + "b_o", np.zeros(d)),
                "ln2_g": self.param(p + "ln2_g", np.ones(d)),
                "ln2_b": self.param(p + "ln2_b", np.zeros(d)),
                "w_fc": self.param(p + "w_fc", normal(rng, (d, 4 * d), s)),
                "b_fc": self.param(p + "b_fc", np.zeros(4 * d)),
                "w_proj": self.param(p + "w_proj", normal(rng, (4 * d, d), proj_std)),
                "b_proj": self.param(p + "b_proj", np.zeros(d)),
            })
        self.lnf_g = self.param("lnf_g", np.ones(d))
        self.lnf_b = self.param("lnf_b", np.zeros(d))
        self.w_out = self.param("w_out", normal(rng, (d, c.vocab_size), s))
        self._masks: dict[int, np.ndarray] = {}

    # -- layout helpers -----------------------------------------------------

    def layout(self, z, x, y_prefix=(), score_mask=None) -> InputLayout:
        c = self.config
        if len(z) > c.doc_cap:
            raise LayoutError(f"document length {len(z)} exceeds doc_cap {c.doc_cap}")
        return layout_input(z, x, y_prefix, c.doc_pos_offset, c.max_positions, score_mask)

    def backward_layout(self, z, x, y) -> InputLayout:
        """Reversed layout for the MMI model: y conditions, then z and x are scored."""
        c = self.config
        target = [*z, SEP_ID, *x]
        score = [True] * len(z) + [False] + [True] * len(x)
        return layout_input(y, (), target, c.doc_pos_offset, c.max_positions, score)

    # -- network ------------------------------------------------------------

    def _causal(self, T: int) -> np.ndarray:
        m = self._masks.get(T)
        if m is None:
            m = np.triu(np.full((T, T), -1e9), k=1)
            self._masks[T] = m
        return m

    def hidden(self, batch: _Batch) -> ad.Tensor:
        c = self.config
        B, T = batch.tokens.shape
        H, dh = c.heads, c.dim // c.heads
        h = ad.add(
            ad.add(ad.embedding(self.tok_emb, batch.tokens), ad.embedding(self.pos_emb, batch.positions)),
            ad.embedding(self.type_emb, batch.types),
        )
        mask = self._causal(T)
        scale = 1.0 / math.sqrt(dh)
        for blk in self.blocks:
            a = ad.layer_norm(h, blk["ln1_g"], blk["ln1_b"])
            qkv = linear(a, blk["w_qkv"], blk["b_qkv"])
            qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, H, dh)), (2, 0, 3, 1, 4))
            q, k, v = qkv[0], qkv[1], qkv[2]
            att = ad.add(ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale), mask)
            att = ad.softmax(att, axis=-1)
            o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, c.dim))
            h = ad.add(h, linear(o, blk["w_o"], blk["b_o"]))
            m = ad.layer_norm(h, blk["ln2_g"], blk["ln2_b"])
            m = linear(ad.gelu(linear(m, blk["w_fc"], blk["b_fc"])), blk["w_proj"], blk["b_proj"])
            h = ad.add(h, m)
        return ad.layer_norm(h, self.lnf_g, self.lnf_b)

    def logits_at(self, batch: _Batch, rows: np.ndarray, cols: np.ndarray) -> ad.Tensor:
        h = self.hidden(batch)
        picked = h[rows, cols]
        return ad.matmul(picked, self.w_out)

    # -- likelihoods -------------------------------------------------------

    def sequence_log_probs(self, layouts: Sequence[InputLayout]) -> ad.Tensor:
        """Per-layout sum of log p(token | prefix) over target-masked tokens.

        Returns a tensor of shape (len(layouts),); differentiable when a
        tape is active.
        """
        batch = _pad(layouts)
        rows, cols, targets = [], [], []
        for i, l in enumerate(layouts):
            idx = np.nonzero(l.target_mask)[0]
            rows.extend([i] * len(idx))
            cols.extend(idx - 1)
            targets.extend(l.tokens[idx])
        if not rows:
            return ad.Tensor(np.zeros(len(layouts)))
        rows_a = np.array(rows)
        logits = self.logits_at(batch, rows_a, np.array(cols))
        nll = ad.cross_entropy(logits, np.array(targets))
        seg = np.zeros((len(layouts), len(rows)))
        seg[rows_a, np.arange(len(rows))] = 1.0
        return ad.neg(ad.matmul(seg, ad.reshape(nll, (len(rows), 1))).reshape(len(layouts)))

    def log_prob(self, y, x, z) -> ad.Tensor:
        """Scalar log p(y | x, z)."""
        if len(y) == 0:
            return ad.Tensor(0.0)
        return self.sequence_log_probs([self.layout(z, x, y)]).reshape(())

    def backward_log_prob(self, z, x, y) -> ad.Tensor:
        """Scalar log p(z, x | y) under a model trained on the reversed layout."""
        if len(z) == 0 and len(x) == 0:
            return ad.Tensor(0.0)
        return self.sequence_log_probs([self.backward_layout(z, x, y)]).reshape(())

    def next_token_log_probs(self, layouts: Sequence[InputLayout]) -> np.ndarray:
        """Log-distribution over the token following each layout, shape (B, V)."""
        batch = _pad(layouts)
        rows = np.arange(len(layouts))
        cols = batch.lengths - 1
        logits = self.logits_at(batch, rows, cols).data
        return ad._log_softmax_np(logits, -1)

    def next_token_dist(self, x, z, y_prefix=()) -> np.ndarray:
        return np.exp(self.next_token_log_probs([self.layout(z, x, y_prefix)])[0])

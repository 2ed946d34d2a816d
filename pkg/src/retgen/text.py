"""Word-level tokenization, vocabularies, JSONL ingestion and synthetic data."""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, BOS, EOS, SEP, UNK = "<pad>", "<bos>", "<eos>", "<sep>", "<unk>"
RESERVED = (PAD, BOS, EOS, SEP, UNK)
PAD_ID, BOS_ID, EOS_ID, SEP_ID, UNK_ID = range(5)

MAX_CONTEXT = 256
MAX_TARGET = 128
DOC_CAP = 100

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_SENT_END = {".", "!", "?"}


def normalize(text: str) -> list[str]:
    """Lowercase and split into words and single punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode_tokens(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def tokenize(self, text: str) -> list[int]:
        return self.encode_tokens(normalize(text))

    def detokenize(self, ids: Sequence[int], skip_special: bool = True) -> str:
        words = []
        for i in ids:
            tok = self.itos[int(i)] if 0 <= int(i) < len(self.itos) else UNK
            if skip_special and tok in (PAD, BOS, EOS, SEP):
                continue
            words.append(tok)
        return " ".join(words)

    def save(self, path) -> None:
        from .checkpoint import atomic_write_text

        atomic_write_text(path, "\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"{path}: reserved tokens missing or reordered")
        vocab = cls()
        for t in lines[len(RESERVED):]:
            vocab.add(t)
        return vocab


def build_vocab_from_texts(texts: Iterable[str], min_freq: int = 1) -> Vocabulary:
    counts: Counter[str] = Counter()
    for t in texts:
        counts.update(normalize(t))
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def _texts_from_jsonl(path) -> Iterator[str]:
    for rec in _read_jsonl(path):
        for key in ("context", "target", "title", "text"):
            if isinstance(rec.get(key), str):
                yield rec[key]


def build_vocab(paths: Sequence[str | Path], min_freq: int = 1) -> Vocabulary:
    """Vocabulary over JSONL corpora/document files (or plain text files)."""

    def texts():
        for p in paths:
            p = Path(p)
            if p.suffix == ".jsonl":
                yield from _texts_from_jsonl(p)
            else:
                yield from p.read_text(encoding="utf-8").splitlines()

    return build_vocab_from_texts(texts(), min_freq)


# ---------------------------------------------------------------------------
# records


@dataclass
class CorpusExample:
    id: str
    context: list[int]
    target: list[int]
    oracle_doc_id: str | None = None


@dataclass
class Document:
    id: str
    title: str
    text: list[int]
    raw: str = ""


@dataclass
class IngestStats:
    read: int = 0
    kept: int = 0
    too_long: int = 0
    single_sentence: int = 0
    malformed: int = 0


class DocumentStore:
    """Immutable id-ordered document collection."""

    def __init__(self, docs: Iterable[Document]):
        docs = list(docs)
        self._by_id = {d.id: d for d in docs}
        if len(self._by_id) != len(docs):
            raise ValueError("duplicate document ids")
        self.ids: list[str] = [d.id for d in docs]

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, doc_id: str) -> Document:
        return self._by_id[doc_id]

    def __iter__(self) -> Iterator[Document]:
        return (self._by_id[i] for i in self.ids)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id


def _read_jsonl(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                yield {"__malformed__": True}
                continue
            if isinstance(rec, dict) and "_meta" in rec:
                continue
            yield rec if isinstance(rec, dict) else {"__malformed__": True}


def load_corpus(
    path,
    vocab: Vocabulary,
    max_context: int = MAX_CONTEXT,
    max_target: int = MAX_TARGET,
    stats: IngestStats | None = None,
) -> Iterator[CorpusExample]:
    """Stream context/target records, dropping over-length and malformed ones."""
    stats = stats if stats is not None else IngestStats()
    for rec in _read_jsonl(path):
        stats.read += 1
        try:
            ex = CorpusExample(
                id=str(rec["id"]),
                context=vocab.tokenize(rec["context"]),
                target=vocab.tokenize(rec["target"]),
                oracle_doc_id=None if rec.get("oracle_doc_id") is None else str(rec["oracle_doc_id"]),
            )
        except (KeyError, TypeError, AttributeError):
            stats.malformed += 1
            log.warning("%s: skipping malformed record #%d", path, stats.read)
            continue
        if len(ex.context) > max_context or len(ex.target) > max_target:
            stats.too_long += 1
            continue
        stats.kept += 1
        yield ex
    if stats.read and stats.malformed == stats.read:
        raise ValueError(f"{path}: every record is malformed")


def split_sentences(tokens: Sequence[str]) -> list[list[str]]:
    sents, cur = [], []
    for t in tokens:
        cur.append(t)
        if t in _SENT_END:
            sents.append(cur)
            cur = []
    if cur:
        sents.append(cur)
    return sents


def load_documents(
    path, vocab: Vocabulary, doc_cap: int = DOC_CAP, sentence_cap: int = 100,
    stats: IngestStats | None = None,
) -> DocumentStore:
    """Load documents; single-sentence entries are dropped, long sentences truncated."""
    stats = stats if stats is not None else IngestStats()
    docs = []
    for rec in _read_jsonl(path):
        stats.read += 1
        try:
            raw = rec["text"]
            doc_id = str(rec["id"])
            title = str(rec.get("title", ""))
            words = normalize(raw)
        except (KeyError, TypeError, AttributeError):
            stats.malformed += 1
            log.warning("%s: skipping malformed document #%d", path, stats.read)
            continue
        sents = split_sentences(words)
        if len(sents) < 2:
            stats.single_sentence += 1
            continue
        words = [w for s in sents for w in s[:sentence_cap]][:doc_cap]
        docs.append(Document(doc_id, title, vocab.encode_tokens(words), raw))
        stats.kept += 1
    if stats.read and stats.malformed == stats.read:
        raise ValueError(f"{path}: every record is malformed")
    return DocumentStore(docs)


# ---------------------------------------------------------------------------
# stopwords


def load_stopwords(path=None) -> frozenset[str]:
    """Read one token per line; the packaged English list when ``path`` is None."""
    if path is None:
        text = resources.files("retgen").joinpath("data/stopwords.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    words = set()
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.update(normalize(line))
    return frozenset(words)


def frequent_tokens(token_lists: Iterable[Sequence[str]], top_percent: float = 1.0) -> frozenset[str]:
    """The most frequent ``top_percent`` % of token types (at least none)."""
    counts: Counter[str] = Counter()
    for toks in token_lists:
        counts.update(toks)
    n = int(len(counts) * top_percent / 100.0)
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    return frozenset(ranked[:n])


def build_stopwords(path=None, corpus: Iterable[Sequence[str]] | None = None,
                    top_percent: float = 1.0) -> frozenset[str]:
    words = set(load_stopwords(path))
    if corpus is not None and top_percent > 0:
        words |= frequent_tokens(corpus, top_percent)
    return frozenset(words)


# ---------------------------------------------------------------------------
# synthetic grounded corpus


@dataclass
class SyntheticConfig:
    n_docs: int = 100
    vocab_size: int = 600
    key_len: int = 2
    fact_len: int = 3
    n_distractors: int = 3
    n_examples: int = 2000
    key_pool: int = 0
    fact_pool: int = 0


@dataclass
class SyntheticCorpus:
    examples: list[dict]
    documents: list[dict]
    config: SyntheticConfig = field(default_factory=SyntheticConfig)


def make_synthetic_grounded_corpus(config: SyntheticConfig, seed: int) -> SyntheticCorpus:
    """Documents are ``key . fact .``; contexts hold a key plus distractor words,
    targets repeat that document's fact words.

    Key, fact and distractor words come from disjoint pools, so a context
    overlaps no document more than its own.  With ``key_pool == 0`` every
    document gets its own key words (keys are disjoint); a positive
    ``key_pool`` draws each key as a distinct combination from that many
    shared words, so a single key word no longer identifies a document.
    ``fact_pool`` likewise bounds the fact vocabulary (0: half the rest).
    """
    c = config
    if c.n_docs < 1 or c.key_len < 1 or c.fact_len < 1:
        raise ValueError("n_docs, key_len and fact_len must be positive")
    n_keys = c.key_pool or c.n_docs * c.key_len
    if c.key_pool and math.comb(c.key_pool, c.key_len) < c.n_docs:
        raise ValueError(f"key_pool={c.key_pool} cannot give {c.n_docs} distinct {c.key_len}-word keys")
    rest = c.vocab_size - n_keys
    n_fact = c.fact_pool or rest // 2
    n_dist = rest - n_fact
    if n_keys < c.key_len or n_fact < c.fact_len or n_dist < max(c.n_distractors, 1):
        raise ValueError(
            f"vocab_size={c.vocab_size} too small for {c.n_docs} docs with unique {c.key_len}-word keys "
            f"plus fact/distractor pools"
        )
    rng = np.random.default_rng(seed)
    width = len(str(max(c.vocab_size, c.n_docs, c.n_examples)))
    key_words = [f"k{i:0{width}d}" for i in range(n_keys)]
    facts = [f"f{i:0{width}d}" for i in range(n_fact)]
    dists = [f"w{i:0{width}d}" for i in range(n_dist)]
    if c.key_pool:
        seen: set[tuple[int, ...]] = set()
        while len(seen) < c.n_docs:
            seen.add(tuple(sorted(rng.choice(n_keys, size=c.key_len, replace=False).tolist())))
        combos = sorted(seen)
        combos = [combos[i] for i in rng.permutation(len(combos))]
    else:
        perm = rng.permutation(n_keys).tolist()
        combos = [tuple(perm[d * c.key_len:(d + 1) * c.key_len]) for d in range(c.n_docs)]

    documents = []
    doc_facts = []
    for d in range(c.n_docs):
        key = [key_words[i] for i in combos[d]]
        fact = [facts[i] for i in rng.choice(n_fact, size=c.fact_len, replace=False)]
        doc_facts.append((key, fact))
        documents.append({
            "id": f"d{d:0{width}d}",
            "title": " ".join(key),
            "text": " ".join(key) + " . " + " ".join(fact) + " .",
        })

    examples = []
    for e in range(c.n_examples):
        d = int(rng.integers(c.n_docs))
        key, fact = doc_facts[d]
        words = list(key) + [dists[i] for i in rng.choice(n_dist, size=c.n_distractors, replace=False)]
        words = [words[i] for i in rng.permutation(len(words))]
        examples.append({
            "id": f"e{e:0{width}d}",
            "context": " ".join(words),
            "target": " ".join(fact),
            "oracle_doc_id": documents[d]["id"],
        })
    return SyntheticCorpus(examples, documents, config)


def write_jsonl(path, records: Iterable[dict], header: dict | None = None) -> None:
    from .checkpoint import atomic_write_text

    lines = []
    if header is not None:
        lines.append(json.dumps({"_meta": header}, sort_keys=True))
    lines.extend(json.dumps(r, sort_keys=True) for r in records)
    atomic_write_text(path, "\n".join(lines) + "\n")


def examples_from_records(records: Iterable[dict], vocab: Vocabulary) -> list[CorpusExample]:
    return [
        CorpusExample(str(r["id"]), vocab.tokenize(r["context"]), vocab.tokenize(r["target"]),
                      r.get("oracle_doc_id"))
        for r in records
    ]


def documents_from_records(records: Iterable[dict], vocab: Vocabulary) -> DocumentStore:
    return DocumentStore(
        Document(str(r["id"]), r.get("title", ""), vocab.tokenize(r["text"]), r["text"]) for r in records
    )

import numpy as np
import pytest

from retgen.generator import GeneratorConfig, GroundedLM
from retgen.retriever import DualEncoder, RetrieverConfig
from retgen.text import (
    SyntheticConfig,
    build_vocab_from_texts,
    documents_from_records,
    examples_from_records,
    make_synthetic_grounded_corpus,
)


class Synthetic:
    def __init__(self, cfg: SyntheticConfig, seed: int):
        corpus = make_synthetic_grounded_corpus(cfg, seed)
        self.vocab = build_vocab_from_texts(
            [d["text"] for d in corpus.documents] + [e["context"] for e in corpus.examples])
        self.store = documents_from_records(corpus.documents, self.vocab)
        self.examples = examples_from_records(corpus.examples, self.vocab)


@pytest.fixture(scope="session")
def small_synth():
    """40 documents with disjoint keys, 600 examples."""
    return Synthetic(SyntheticConfig(n_docs=40, vocab_size=300, n_examples=600), 11)


@pytest.fixture
def tiny_lm():
    return GroundedLM(GeneratorConfig(30, dim=8, layers=2, heads=2, doc_pos_offset=16, doc_cap=8,
                                      max_context=8, max_target=8), seed=0)


@pytest.fixture
def tiny_retriever():
    return DualEncoder(RetrieverConfig(30, dim=4, embed_dim=5, init_std=0.5), seed=0)


def random_seq(rng, n, lo=5, hi=30):
    return rng.integers(lo, hi, n).tolist()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)

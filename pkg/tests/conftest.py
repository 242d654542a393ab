import numpy as np
import pytest

from sentorder.corpus import CorpusStore, Document
from sentorder.sampler import encode_store
from sentorder.vocab import build_vocab


def store_from(docs):
    """Build a store directly from lists of sentence strings."""
    return CorpusStore(tuple(
        Document(i, tuple(sentences)) for i, sentences in enumerate(docs)
    ))


@pytest.fixture(scope="session")
def word_store():
    """Ten documents of 3-6 sentences over a small word vocabulary."""
    rng = np.random.default_rng(42)
    words = [f"w{i}" for i in range(20)]
    docs = []
    for d in range(10):
        n = 3 + d % 4
        docs.append([
            " ".join(rng.choice(words, size=4)) for _ in range(n)
        ])
    return store_from(docs)


@pytest.fixture(scope="session")
def word_vocab(word_store):
    return build_vocab(word_store, max_size=64)


@pytest.fixture(scope="session")
def word_corpus(word_store, word_vocab):
    return encode_store(word_store, word_vocab)

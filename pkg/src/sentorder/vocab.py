"""Word-level frequency vocabulary with reserved control tokens.

Tokenization is deliberately simple: lowercase, split on whitespace, and
split punctuation into single-character tokens. Control tokens occupy the
first five ids so encoded text can never collide with them.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

from .corpus import CorpusStore
from .errors import FatalError

PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_SPECIALS = len(SPECIALS)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase ``text`` and split it on whitespace and punctuation boundaries."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:NUM_SPECIALS] != SPECIALS:
            raise ValueError(f"vocab must start with {SPECIALS}")

    @cached_property
    def index(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)


def build_vocab(store: CorpusStore, max_size: int) -> Vocab:
    """Count surface tokens over the store and keep the most frequent ones.

    The result holds the five control tokens plus the ``max_size - 5`` most
    frequent tokens; frequency ties break lexicographically, so the build is
    deterministic.
    """
    if max_size < NUM_SPECIALS + 1:
        raise ValueError(f"max_size must be >= {NUM_SPECIALS + 1}, got {max_size}")
    counts: Counter[str] = Counter()
    for doc in store:
        for sentence in doc.sentences:
            counts.update(tokenize(sentence))
    if not counts:
        raise FatalError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = tuple(tok for tok, _ in ranked[: max_size - NUM_SPECIALS])
    return Vocab(SPECIALS + kept)


def encode(vocab: Vocab, sentence: str) -> list[int]:
    """Map a sentence to token ids; out-of-vocabulary tokens become UNK."""
    index = vocab.index
    return [index.get(tok, UNK_ID) for tok in tokenize(sentence)]


def save_vocab(vocab: Vocab, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")
    return path


def load_vocab(path: str | Path) -> Vocab:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FatalError(f"cannot read {path}: {exc.strerror or exc}") from exc
    tokens = tuple(line for line in lines if line)
    if tokens[:NUM_SPECIALS] != SPECIALS:
        raise FatalError(f"not a vocab file (bad control tokens): {path}")
    return Vocab(tokens)

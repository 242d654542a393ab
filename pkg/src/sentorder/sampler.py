"""Sentence-pair example construction for order-supervised pretraining.

Five relations between the anchor sentence A and its partner B are supported:

* ``NEXT``      - B immediately follows A in the same document.
* ``PREV``      - B immediately precedes A.
* ``NEXT_SKIP`` - B follows A with exactly one sentence between them.
* ``PREV_SKIP`` - B precedes A with exactly one sentence between them.
* ``OTHER_DOC`` - B is a random sentence from a different document.

A classification scheme decides which relations are sampled and how they map
onto target probability vectors. The smoothed 3-class scheme folds the skip
relations onto their adjacent class with 0.8 of the probability mass, the
remaining 0.2 split evenly over the other classes.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import vocab as vocab_mod
from .corpus import CorpusStore
from .errors import FatalError
from .vocab import CLS_ID, MASK_ID, NUM_SPECIALS, SEP_ID, Vocab

RESAMPLE_ATTEMPTS = 16

EXAMPLES_MAGIC = b"SOEX"
EXAMPLES_VERSION = 1


class OrderLabel(enum.IntEnum):
    """Relation of the partner sentence B to the anchor sentence A."""

    NEXT = 0
    PREV = 1
    NEXT_SKIP = 2
    PREV_SKIP = 3
    OTHER_DOC = 4


_SWAPPED = {
    OrderLabel.NEXT: OrderLabel.PREV,
    OrderLabel.PREV: OrderLabel.NEXT,
    OrderLabel.NEXT_SKIP: OrderLabel.PREV_SKIP,
    OrderLabel.PREV_SKIP: OrderLabel.NEXT_SKIP,
    OrderLabel.OTHER_DOC: OrderLabel.OTHER_DOC,
}

# Offset of B's sentence index relative to the anchor, per relation.
_PARTNER_OFFSET = {
    OrderLabel.NEXT: 1,
    OrderLabel.PREV: -1,
    OrderLabel.NEXT_SKIP: 2,
    OrderLabel.PREV_SKIP: -2,
}

# Skip relations fold onto their adjacent class under the smoothed scheme.
_SMOOTH_TARGET = {
    OrderLabel.NEXT_SKIP: OrderLabel.NEXT,
    OrderLabel.PREV_SKIP: OrderLabel.PREV,
}


@dataclass(frozen=True)
class OrderScheme:
    """Which relations are sampled and how they map to target classes."""

    kind: str
    emitted: tuple[OrderLabel, ...]
    classes: tuple[OrderLabel, ...]
    smoothing: float = 1.0

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def min_sentences(self) -> int:
        """Smallest document length that supports every emitted relation."""
        return 3 if OrderLabel.NEXT_SKIP in self.emitted else 2


_EXACT3 = (OrderLabel.NEXT, OrderLabel.PREV, OrderLabel.OTHER_DOC)
_ALL5 = tuple(OrderLabel)

SCHEMES: dict[str, OrderScheme] = {
    "nsp2": OrderScheme("nsp2", (OrderLabel.NEXT, OrderLabel.OTHER_DOC),
                        (OrderLabel.NEXT, OrderLabel.OTHER_DOC)),
    "pn3": OrderScheme("pn3", _EXACT3, _EXACT3),
    "pn5": OrderScheme("pn5", _ALL5, _ALL5),
    "pnsmth": OrderScheme("pnsmth", _ALL5, _EXACT3, smoothing=0.8),
}


def get_scheme(name: str) -> OrderScheme:
    try:
        return SCHEMES[name]
    except KeyError:
        raise ValueError(f"unknown scheme {name!r}; choose from {sorted(SCHEMES)}") from None


@dataclass(frozen=True)
class MaskingConfig:
    """Independent per-token corruption for the masked-word objective."""

    select_rate: float = 0.15
    mask_share: float = 0.80
    random_share: float = 0.10
    keep_share: float = 0.10

    def __post_init__(self):
        if not 0.0 <= self.select_rate <= 1.0:
            raise ValueError(f"select_rate must be in [0,1], got {self.select_rate}")
        total = self.mask_share + self.random_share + self.keep_share
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"mask/random/keep shares must sum to 1, got {total}")


@dataclass(eq=False)
class PairExample:
    """One packed training instance: [CLS] A [SEP] B [SEP]."""

    tokens: np.ndarray
    segment_ids: np.ndarray
    label: OrderLabel
    target: np.ndarray
    mlm_positions: np.ndarray
    mlm_labels: np.ndarray
    source: tuple[int, int]


def examples_equal(a: PairExample, b: PairExample) -> bool:
    return (
        a.label == b.label
        and a.source == b.source
        and np.array_equal(a.tokens, b.tokens)
        and np.array_equal(a.segment_ids, b.segment_ids)
        and np.array_equal(a.target, b.target)
        and np.array_equal(a.mlm_positions, b.mlm_positions)
        and np.array_equal(a.mlm_labels, b.mlm_labels)
    )


@dataclass(frozen=True)
class EncodedCorpus:
    """A corpus store with every sentence mapped to token ids."""

    docs: tuple[tuple[np.ndarray, ...], ...]

    def __len__(self) -> int:
        return len(self.docs)


def encode_store(store: CorpusStore, vocab: Vocab) -> EncodedCorpus:
    docs = tuple(
        tuple(np.asarray(vocab_mod.encode(vocab, s), dtype=np.int64) for s in doc.sentences)
        for doc in store
    )
    return EncodedCorpus(docs)


def valid_anchors(n_sentences: int, label: OrderLabel) -> range:
    """Anchor positions in a document of ``n_sentences`` that admit ``label``."""
    if label is OrderLabel.OTHER_DOC:
        return range(n_sentences)
    offset = _PARTNER_OFFSET[label]
    if offset > 0:
        return range(0, n_sentences - offset)
    return range(-offset, n_sentences)


def build_target(label: OrderLabel, scheme: OrderScheme) -> np.ndarray:
    """Target probability vector for ``label`` under ``scheme``.

    Labels that are themselves classes get a one-hot vector. Skip labels under
    the smoothed scheme get ``smoothing`` on the folded class and the residual
    mass split evenly over the remaining classes. The split is computed in
    decimal arithmetic so 0.8 yields residual entries of exactly 0.1.
    """
    if label not in scheme.emitted:
        raise ValueError(f"label {label.name} is not emitted by scheme {scheme.kind}")
    target = np.zeros(scheme.num_classes, dtype=np.float64)
    if label in scheme.classes:
        target[scheme.classes.index(label)] = 1.0
        return target
    mapped = _SMOOTH_TARGET[label]
    residual = (1 - Fraction(str(scheme.smoothing))) / (scheme.num_classes - 1)
    target[:] = float(residual)
    target[scheme.classes.index(mapped)] = scheme.smoothing
    return target


def truncate_pair(a: list[int], b: list[int], budget: int) -> None:
    """Trim from the end of the longer sentence (ties trim B) until the pair fits."""
    while len(a) + len(b) > budget:
        longer = a if len(a) > len(b) else b
        longer.pop()


def pack_pair(a_ids: Sequence[int], b_ids: Sequence[int], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Build the packed id/segment arrays [CLS] A [SEP] B [SEP], truncated to ``max_len``."""
    a, b = list(a_ids), list(b_ids)
    truncate_pair(a, b, max_len - 3)
    tokens = np.asarray([CLS_ID, *a, SEP_ID, *b, SEP_ID], dtype=np.int64)
    segments = np.asarray([0] * (len(a) + 2) + [1] * (len(b) + 1), dtype=np.int64)
    return tokens, segments


def sample_pair(corpus: EncodedCorpus, scheme: OrderScheme, max_len: int,
                rng: np.random.Generator) -> PairExample:
    """Draw one uncorrupted pair example.

    The relation is drawn uniformly over the scheme's emitted set, then a
    document is drawn uniformly and the anchor uniformly over the positions
    that admit the relation. Documents that cannot host the drawn relation
    are redrawn a bounded number of times before failing.
    """
    if max_len < 8:
        raise ValueError(f"max_len must be >= 8, got {max_len}")
    label = scheme.emitted[int(rng.integers(len(scheme.emitted)))]
    for _ in range(RESAMPLE_ATTEMPTS):
        doc_idx = int(rng.integers(len(corpus)))
        doc = corpus.docs[doc_idx]
        anchors = valid_anchors(len(doc), label)
        if len(anchors) == 0:
            continue
        if label is OrderLabel.OTHER_DOC and len(corpus) < 2:
            continue
        a_idx = anchors[int(rng.integers(len(anchors)))]
        if label is OrderLabel.OTHER_DOC:
            other = int(rng.integers(len(corpus) - 1))
            if other >= doc_idx:
                other += 1
            b_ids = corpus.docs[other][int(rng.integers(len(corpus.docs[other])))]
        else:
            b_ids = doc[a_idx + _PARTNER_OFFSET[label]]
        tokens, segments = pack_pair(doc[a_idx], b_ids, max_len)
        return PairExample(
            tokens=tokens,
            segment_ids=segments,
            label=label,
            target=build_target(label, scheme),
            mlm_positions=np.empty(0, dtype=np.int64),
            mlm_labels=np.empty(0, dtype=np.int64),
            source=(doc_idx, int(a_idx)),
        )
    raise FatalError(
        f"no document admits relation {label.name} after {RESAMPLE_ATTEMPTS} attempts"
    )


def apply_mlm_mask(tokens: np.ndarray, cfg: MaskingConfig, vocab_size: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corrupt a packed token sequence for the masked-word objective.

    Every non-control position is selected independently with
    ``cfg.select_rate``; a selected position becomes [MASK], a random
    non-control id, or stays unchanged according to the share split. Returns
    (corrupted tokens, selected positions, original ids at those positions).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    maskable = np.flatnonzero(tokens >= NUM_SPECIALS)
    if maskable.size == 0:
        return tokens.copy(), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    selected = maskable[rng.random(maskable.size) < cfg.select_rate]
    originals = tokens[selected].copy()
    corrupted = tokens.copy()
    action = rng.random(selected.size)
    random_ids = rng.integers(NUM_SPECIALS, vocab_size, size=selected.size)
    for pos, act, rid in zip(selected, action, random_ids):
        if act < cfg.mask_share:
            corrupted[pos] = MASK_ID
        elif act < cfg.mask_share + cfg.random_share:
            corrupted[pos] = rid
        # else: keep the original token; it still contributes to the loss.
    return corrupted, selected, originals


def mask_example(example: PairExample, cfg: MaskingConfig, vocab_size: int,
                 rng: np.random.Generator) -> PairExample:
    corrupted, positions, originals = apply_mlm_mask(example.tokens, cfg, vocab_size, rng)
    return replace(example, tokens=corrupted, mlm_positions=positions, mlm_labels=originals)


def _infer_scheme(example: PairExample, new_label: OrderLabel) -> OrderScheme:
    # The target length pins the scheme except for the 3-class pair, where
    # only the smoothed scheme ever emits skip relations.
    n = len(example.target)
    if n == 2:
        return SCHEMES["nsp2"]
    if n == 5:
        return SCHEMES["pn5"]
    if example.label in _SMOOTH_TARGET or new_label in _SMOOTH_TARGET:
        return SCHEMES["pnsmth"]
    return SCHEMES["pn3"]


def swap(example: PairExample) -> PairExample:
    """Exchange the two sentences of an example.

    Tokens and segment ids are rebuilt, corrupted positions move with their
    tokens, the relation maps to its mirror (OTHER_DOC is unchanged), and the
    target vector is rebuilt. Swapping twice restores the original example.
    """
    seps = np.flatnonzero(example.tokens == SEP_ID)
    first_sep = int(seps[0])
    m = first_sep - 1                      # length of A
    n = len(example.tokens) - first_sep - 2  # length of B
    a = example.tokens[1:first_sep]
    b = example.tokens[first_sep + 1:-1]
    tokens = np.concatenate(([CLS_ID], b, [SEP_ID], a, [SEP_ID]))
    segments = np.asarray([0] * (n + 2) + [1] * (m + 1), dtype=np.int64)

    pos = example.mlm_positions
    in_a = (pos >= 1) & (pos <= m)
    new_pos = np.where(in_a, pos + n + 1, pos - (m + 1))
    order = np.argsort(new_pos, kind="stable")

    new_label = _SWAPPED[example.label]
    scheme = _infer_scheme(example, new_label)
    return PairExample(
        tokens=tokens,
        segment_ids=segments,
        label=new_label,
        target=build_target(new_label, scheme),
        mlm_positions=new_pos[order],
        mlm_labels=example.mlm_labels[order],
        source=example.source,
    )


class ExampleStream:
    """Deterministic example source with worker-sharded random streams.

    Worker ``w`` draws from its own generator seeded by ``(seed, w)``; draws
    are merged round-robin, so the delivered sequence depends only on
    ``(seed, workers)`` and never on scheduling.
    """

    def __init__(self, corpus: EncodedCorpus, scheme: OrderScheme, max_len: int,
                 masking: MaskingConfig, vocab_size: int, seed: int | Sequence[int],
                 workers: int = 1):
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        self.corpus = corpus
        self.scheme = scheme
        self.max_len = max_len
        self.masking = masking
        self.vocab_size = vocab_size
        entropy = list(seed) if isinstance(seed, (list, tuple)) else [seed]
        self._rngs = [
            np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy + [w])))
            for w in range(workers)
        ]
        self._next_worker = 0

    def draw(self) -> PairExample:
        rng = self._rngs[self._next_worker]
        self._next_worker = (self._next_worker + 1) % len(self._rngs)
        example = sample_pair(self.corpus, self.scheme, self.max_len, rng)
        return mask_example(example, self.masking, self.vocab_size, rng)

    def take(self, n: int) -> list[PairExample]:
        return [self.draw() for _ in range(n)]

    def state(self) -> dict:
        return {
            "workers": [rng.bit_generator.state for rng in self._rngs],
            "next_worker": self._next_worker,
        }

    def set_state(self, state: dict) -> None:
        if len(state["workers"]) != len(self._rngs):
            raise ValueError("worker count does not match saved stream state")
        for rng, s in zip(self._rngs, state["workers"]):
            rng.bit_generator.state = s
        self._next_worker = state["next_worker"]


_SCHEME_BYTE = {name: i for i, name in enumerate(sorted(SCHEMES))}
_BYTE_SCHEME = {i: name for name, i in _SCHEME_BYTE.items()}


def write_examples(path: str | Path, examples: Iterable[PairExample],
                   scheme: OrderScheme) -> Path:
    """Serialize examples to the binary record format.

    Little-endian throughout: u32 lengths, u32 token/segment/position arrays,
    one label byte, and the target vector as 8-byte floats. The header packs
    a magic, a format version, the scheme byte, and the record count.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    examples = list(examples)
    with open(path, "wb") as fh:
        fh.write(EXAMPLES_MAGIC)
        fh.write(struct.pack("<IBI", EXAMPLES_VERSION, _SCHEME_BYTE[scheme.kind], len(examples)))
        for ex in examples:
            fh.write(struct.pack("<I", len(ex.tokens)))
            fh.write(ex.tokens.astype("<u4").tobytes())
            fh.write(ex.segment_ids.astype("<u4").tobytes())
            fh.write(struct.pack("<I", len(ex.mlm_positions)))
            fh.write(ex.mlm_positions.astype("<u4").tobytes())
            fh.write(ex.mlm_labels.astype("<u4").tobytes())
            fh.write(struct.pack("<BI", int(ex.label), len(ex.target)))
            fh.write(ex.target.astype("<f8").tobytes())
            fh.write(struct.pack("<II", ex.source[0], ex.source[1]))
    return path


def read_examples(path: str | Path) -> tuple[list[PairExample], OrderScheme]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FatalError(f"cannot read {path}: {exc.strerror or exc}") from exc
    if blob[:4] != EXAMPLES_MAGIC:
        raise FatalError(f"not an examples file: {path}")
    version, scheme_byte, count = struct.unpack_from("<IBI", blob, 4)
    if version != EXAMPLES_VERSION:
        raise FatalError(f"unsupported examples version {version} in {path}")
    scheme = SCHEMES[_BYTE_SCHEME[scheme_byte]]
    off = 4 + struct.calcsize("<IBI")
    examples = []
    for _ in range(count):
        (ntok,) = struct.unpack_from("<I", blob, off)
        off += 4
        tokens = np.frombuffer(blob, dtype="<u4", count=ntok, offset=off).astype(np.int64)
        off += 4 * ntok
        segments = np.frombuffer(blob, dtype="<u4", count=ntok, offset=off).astype(np.int64)
        off += 4 * ntok
        (nmask,) = struct.unpack_from("<I", blob, off)
        off += 4
        positions = np.frombuffer(blob, dtype="<u4", count=nmask, offset=off).astype(np.int64)
        off += 4 * nmask
        originals = np.frombuffer(blob, dtype="<u4", count=nmask, offset=off).astype(np.int64)
        off += 4 * nmask
        label_byte, nclass = struct.unpack_from("<BI", blob, off)
        off += struct.calcsize("<BI")
        target = np.frombuffer(blob, dtype="<f8", count=nclass, offset=off).copy()
        off += 8 * nclass
        doc_idx, a_idx = struct.unpack_from("<II", blob, off)
        off += 8
        examples.append(PairExample(
            tokens=tokens, segment_ids=segments, label=OrderLabel(label_byte),
            target=target, mlm_positions=positions, mlm_labels=originals,
            source=(doc_idx, a_idx),
        ))
    return examples, scheme

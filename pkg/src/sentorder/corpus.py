"""Plain-text document store.

Input format: UTF-8 text, one sentence per line, documents separated by one
or more blank lines. LF and CRLF line endings are both accepted. Adjacency
of sentences within a document is the ground truth the pair sampler builds
on, so order is preserved exactly as read.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import FatalError

STORE_VERSION = 1
STORE_TEXT_NAME = "corpus.txt"
STORE_META_NAME = "meta.txt"


@dataclass(frozen=True)
class Document:
    id: int
    sentences: tuple[str, ...]


@dataclass(frozen=True)
class CorpusStore:
    documents: tuple[Document, ...]

    @property
    def sentence_count(self) -> int:
        return sum(len(d.sentences) for d in self.documents)

    @property
    def doc_index(self) -> dict[int, int]:
        return {d.id: i for i, d in enumerate(self.documents)}

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)


def _read_text(path: Path) -> str:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FatalError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FatalError(f"invalid utf-8 in {path} at byte {exc.start}") from exc


def _split_documents(lines: Iterable[str]) -> list[tuple[str, ...]]:
    docs: list[tuple[str, ...]] = []
    current: list[str] = []
    for line in lines:
        # Trailing whitespace (including a CR from CRLF endings) is not content.
        sentence = line.rstrip()
        if sentence:
            current.append(sentence)
        elif current:
            docs.append(tuple(current))
            current = []
    if current:
        docs.append(tuple(current))
    return docs


def ingest(paths: Sequence[str | Path]) -> CorpusStore:
    """Read text files into a store; document boundaries are blank lines.

    Files contribute documents in the order given; document ids are assigned
    densely in that order, so the result is deterministic for a fixed path
    list.
    """
    documents: list[Document] = []
    for path in paths:
        text = _read_text(Path(path))
        for sentences in _split_documents(text.split("\n")):
            documents.append(Document(id=len(documents), sentences=sentences))
    if not documents:
        raise FatalError("empty corpus")
    return CorpusStore(tuple(documents))


def filter_short_documents(store: CorpusStore, min_sentences: int) -> CorpusStore:
    """Keep documents with at least ``min_sentences`` sentences, reassigning ids densely."""
    if min_sentences < 1:
        raise ValueError(f"min_sentences must be >= 1, got {min_sentences}")
    kept = [d for d in store.documents if len(d.sentences) >= min_sentences]
    if not kept:
        raise FatalError("no usable documents")
    return CorpusStore(tuple(Document(i, d.sentences) for i, d in enumerate(kept)))


def subset(store: CorpusStore, indices: Sequence[int]) -> CorpusStore:
    """New store from the documents at ``indices`` (order kept, ids reassigned)."""
    picked = [store.documents[i] for i in indices]
    if not picked:
        raise FatalError("no usable documents")
    return CorpusStore(tuple(Document(i, d.sentences) for i, d in enumerate(picked)))


def serialize(store: CorpusStore) -> str:
    """Canonical text form: one sentence per line, one blank line between documents."""
    return "\n\n".join("\n".join(d.sentences) for d in store.documents) + "\n"


def save_store(store: CorpusStore, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / STORE_TEXT_NAME).write_text(serialize(store), encoding="utf-8")
    meta = (
        f"version={STORE_VERSION}\n"
        f"documents={len(store)}\n"
        f"sentences={store.sentence_count}\n"
    )
    (directory / STORE_META_NAME).write_text(meta, encoding="utf-8")
    return directory


def load_store(directory: str | Path) -> CorpusStore:
    directory = Path(directory)
    meta_path = directory / STORE_META_NAME
    meta = {}
    for line in _read_text(meta_path).splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key] = value
    if int(meta.get("version", -1)) != STORE_VERSION:
        raise FatalError(f"unsupported store version in {meta_path}: {meta.get('version')}")
    store = ingest([directory / STORE_TEXT_NAME])
    if len(store) != int(meta["documents"]) or store.sentence_count != int(meta["sentences"]):
        raise FatalError(
            f"corrupt store in {directory}: header says "
            f"{meta['documents']} docs / {meta['sentences']} sentences, "
            f"found {len(store)} / {store.sentence_count}"
        )
    return store

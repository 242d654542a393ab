"""Desk-scale pretraining toolkit for symmetric sentence-order objectives."""

from .corpus import CorpusStore, Document, filter_short_documents, ingest
from .errors import FatalError
from .sampler import (
    MaskingConfig,
    OrderLabel,
    OrderScheme,
    PairExample,
    SCHEMES,
    build_target,
    get_scheme,
    sample_pair,
    swap,
)
from .vocab import Vocab, build_vocab, encode

__version__ = "0.1.0"

__all__ = [
    "CorpusStore",
    "Document",
    "FatalError",
    "MaskingConfig",
    "OrderLabel",
    "OrderScheme",
    "PairExample",
    "SCHEMES",
    "Vocab",
    "__version__",
    "build_target",
    "build_vocab",
    "encode",
    "filter_short_documents",
    "get_scheme",
    "ingest",
    "sample_pair",
    "swap",
]

"""Probes for order supervision: held-out accuracy, input-swap sensitivity,
and a synthetic corpus whose sentence order is learnable by construction.

Synthetic sentences look like ``pos01 s7t03 s7e012 s7e019 w31``: a cyclic
position marker, the document's topic token, two chain tokens linking each
sentence to the next one in its document, and filler tokens for the
masked-word objective. Within a document the position marker advances by one
per sentence and adjacent sentences share exactly one chain token, while
sentences from different documents almost always differ in topic, so every
sampled order relation is decidable from the text alone. Topic and chain
tokens embed the generator seed, which keeps token assignments from
different seeds disjoint.

The swap probe fine-tunes one fresh binary head per run and evaluates the
same fine-tuned weights twice, once with the sentence pair as given and once
with the two sentences exchanged; the accuracy gap measures how
order-sensitive the pretrained representation is.
"""

from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import model as model_mod
from .autodiff import Tape, zero_grads
from .corpus import CorpusStore, Document
from .errors import FatalError
from .model import Batch, ModelParams, clone_params, pad_batch
from .sampler import OrderLabel, OrderScheme, PairExample, SCHEMES, pack_pair
from .train import OptimizerConfig, adamw_step, init_train_state, lr_at, single_phase
from .vocab import Vocab, encode

_ORDINAL_RE = re.compile(r"^pos(\d+)$")
_TOPIC_RE = re.compile(r"^s\d+t\d+$")
_CHAIN_RE = re.compile(r"^s\d+e\d+$")


# ---------------------------------------------------------------------------
# Reports


@dataclass
class ProbeReport:
    scheme: str
    n: int
    accuracy_original: float
    accuracy_swapped: float | None
    delta: float | None
    per_label_accuracy: dict[str, float]
    runs: int = 1

    def __post_init__(self):
        if not 0.0 <= self.accuracy_original <= 1.0:
            raise ValueError(f"accuracy out of range: {self.accuracy_original}")
        if self.accuracy_swapped is not None:
            expected = self.accuracy_original - self.accuracy_swapped
            if abs((self.delta or 0.0) - expected) > 1e-9:
                raise ValueError(f"delta {self.delta} inconsistent with accuracies")


REPORT_KEYS = ("scheme", "runs", "n", "accuracy_original", "accuracy_swapped", "delta")


def report_to_text(report: ProbeReport) -> str:
    """Flat JSON object with a fixed key order; per-label keys come last."""
    flat: dict[str, object] = {
        "scheme": report.scheme,
        "runs": report.runs,
        "n": report.n,
        "accuracy_original": report.accuracy_original,
        "accuracy_swapped": report.accuracy_swapped,
        "delta": report.delta,
    }
    for label, value in report.per_label_accuracy.items():
        flat[f"per_label_accuracy.{label}"] = value
    return json.dumps(flat, indent=2) + "\n"


def save_report(path: str | Path, report: ProbeReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_to_text(report), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Held-out order accuracy


def _infer_scheme(examples: Sequence[PairExample]) -> OrderScheme:
    width = len(examples[0].target)
    if width == 2:
        return SCHEMES["nsp2"]
    if width == 5:
        return SCHEMES["pn5"]
    skips = (OrderLabel.NEXT_SKIP, OrderLabel.PREV_SKIP)
    if any(ex.label in skips for ex in examples):
        return SCHEMES["pnsmth"]
    return SCHEMES["pn3"]


def order_accuracy(params: ModelParams, examples: Sequence[PairExample],
                   scheme: OrderScheme | None = None, batch_size: int = 64) -> ProbeReport:
    """Fraction of examples whose predicted class matches the target argmax.

    Under the smoothed scheme a skip-relation example counts as correct when
    the prediction hits the class carrying the bulk of the target mass.
    """
    if not examples:
        raise FatalError("no examples to evaluate")
    scheme = scheme or _infer_scheme(examples)
    hits: dict[OrderLabel, int] = {}
    totals: dict[OrderLabel, int] = {}
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        batch = pad_batch(chunk)
        preds = model_mod.batch_order_predictions(params, batch)
        wanted = np.argmax(batch.targets, axis=-1)
        for ex, pred, want in zip(chunk, preds, wanted):
            totals[ex.label] = totals.get(ex.label, 0) + 1
            hits[ex.label] = hits.get(ex.label, 0) + int(pred == want)
    n = sum(totals.values())
    per_label = {
        label.name: hits.get(label, 0) / totals[label]
        for label in sorted(totals, key=int)
    }
    return ProbeReport(
        scheme=scheme.kind,
        n=n,
        accuracy_original=sum(hits.values()) / n,
        accuracy_swapped=None,
        delta=None,
        per_label_accuracy=per_label,
    )


# ---------------------------------------------------------------------------
# Pair task and swap probe


@dataclass(frozen=True)
class PairTaskDataset:
    """Binary sentence-pair task with disjoint train/dev sentence pairs."""

    train: tuple[tuple[str, str, int], ...]
    dev: tuple[tuple[str, str, int], ...]

    def __post_init__(self):
        for name, split in (("train", self.train), ("dev", self.dev)):
            if not split:
                raise ValueError(f"{name} split is empty")
            positive = sum(label for _, _, label in split) / len(split)
            if not 0.45 <= positive <= 0.55:
                raise ValueError(f"{name} split label balance {positive:.3f} outside 45-55%")
        train_texts = {s for a, b, _ in self.train for s in (a, b)}
        dev_texts = {s for a, b, _ in self.dev for s in (a, b)}
        if train_texts & dev_texts:
            raise ValueError("train and dev splits share sentence text")


def save_pair_dataset(path: str | Path, dataset: PairTaskDataset) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("split\tlabel\ta\tb\n")
        for split_name, split in (("train", dataset.train), ("dev", dataset.dev)):
            for a, b, label in split:
                fh.write(f"{split_name}\t{label}\t{a}\t{b}\n")
    return path


def load_pair_dataset(path: str | Path) -> PairTaskDataset:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FatalError(f"cannot read {path}: {exc.strerror or exc}") from exc
    if not lines or lines[0] != "split\tlabel\ta\tb":
        raise FatalError(f"not a pair-task file: {path}")
    splits: dict[str, list[tuple[str, str, int]]] = {"train": [], "dev": []}
    for line in lines[1:]:
        if not line.strip():
            continue
        split_name, label, a, b = line.split("\t")
        splits[split_name].append((a, b, int(label)))
    return PairTaskDataset(tuple(splits["train"]), tuple(splits["dev"]))


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 3
    lr: float = 2e-5
    batch_size: int = 32
    warmup_fraction: float = 0.10
    weight_decay: float = 0.01


def _pair_batch(items: Sequence[tuple[np.ndarray, np.ndarray, int]], max_len: int,
                swapped: bool) -> tuple[Batch, np.ndarray]:
    packed = []
    for a_ids, b_ids, _ in items:
        first, second = (b_ids, a_ids) if swapped else (a_ids, b_ids)
        packed.append(pack_pair(first, second, max_len))
    t = max(len(tokens) for tokens, _ in packed)
    bsz = len(items)
    ids = np.zeros((bsz, t), dtype=np.int64)
    segments = np.zeros((bsz, t), dtype=np.int64)
    mask = np.zeros((bsz, t), dtype=np.float64)
    for i, (tokens, segs) in enumerate(packed):
        ids[i, :len(tokens)] = tokens
        segments[i, :len(tokens)] = segs
        mask[i, :len(tokens)] = 1.0
    labels = np.asarray([label for _, _, label in items], dtype=np.int64)
    return Batch(ids=ids, segments=segments, mask=mask), labels


def _probe_logits(params: ModelParams, batch: Batch, train: bool,
                  rng: np.random.Generator | None) -> ad.Tensor:
    _, pooled = model_mod.encode(params, batch, train=train, rng=rng)
    return ad.add(ad.matmul(pooled, params.tensors["probe.weight"]),
                  params.tensors["probe.bias"])


def _probe_accuracy(params: ModelParams, items, max_len: int, swapped: bool,
                    batch_size: int = 64) -> tuple[float, dict[str, float]]:
    hits = {0: 0, 1: 0}
    totals = {0: 0, 1: 0}
    for start in range(0, len(items), batch_size):
        batch, labels = _pair_batch(items[start:start + batch_size], max_len, swapped)
        preds = np.argmax(_probe_logits(params, batch, False, None).data, axis=-1)
        for pred, label in zip(preds, labels):
            totals[int(label)] += 1
            hits[int(label)] += int(pred == label)
    accuracy = sum(hits.values()) / sum(totals.values())
    per_label = {str(k): hits[k] / totals[k] for k in (0, 1) if totals[k]}
    return accuracy, per_label


def swap_probe(params: ModelParams, vocab: Vocab, dataset: PairTaskDataset,
               cfg: FinetuneConfig | None = None, seed: int = 0,
               scheme_name: str = "") -> ProbeReport:
    """Fine-tune a fresh binary head, then evaluate dev both ways.

    The pretrained weights are copied, so the caller's parameters are
    untouched and several probe runs from the same checkpoint stay paired.
    """
    cfg = cfg or FinetuneConfig()
    head_ss, shuffle_ss, dropout_ss = np.random.SeedSequence(seed).spawn(3)
    head_rng = np.random.default_rng(head_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)

    ft = clone_params(params)
    hidden = ft.config.hidden
    ft.tensors["probe.weight"] = ad.Tensor(head_rng.normal(0.0, 0.02, size=(hidden, 2)))
    ft.tensors["probe.bias"] = ad.Tensor(np.zeros(2))

    max_len = ft.config.max_position
    encode_items = lambda split: [
        (np.asarray(encode(vocab, a), dtype=np.int64),
         np.asarray(encode(vocab, b), dtype=np.int64), label)
        for a, b, label in split
    ]
    train_items = encode_items(dataset.train)
    dev_items = encode_items(dataset.dev)

    steps_per_epoch = (len(train_items) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    plan = single_phase(total_steps, max_len, cfg.warmup_fraction)
    opt = OptimizerConfig(lr_max=cfg.lr, weight_decay=cfg.weight_decay)
    state = init_train_state(ft)

    onehot = np.eye(2)
    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train_items))
        for start in range(0, len(order), cfg.batch_size):
            picked = [train_items[i] for i in order[start:start + cfg.batch_size]]
            batch, labels = _pair_batch(picked, max_len, swapped=False)
            lr = lr_at(state.step + 1, plan, opt)
            with Tape() as tape:
                logits = _probe_logits(ft, batch, True, dropout_rng)
                ce = ad.cross_entropy_with_soft_targets(logits, onehot[labels])
                tape.backward(ce)
            grads = {
                name: t.grad if t.grad is not None else np.zeros_like(t.data)
                for name, t in ft.tensors.items()
            }
            zero_grads(ft.tensors.values())
            adamw_step(state, grads, opt, lr)

    accuracy_original, per_label = _probe_accuracy(ft, dev_items, max_len, swapped=False)
    accuracy_swapped, _ = _probe_accuracy(ft, dev_items, max_len, swapped=True)
    return ProbeReport(
        scheme=scheme_name,
        n=len(dev_items),
        accuracy_original=accuracy_original,
        accuracy_swapped=accuracy_swapped,
        delta=accuracy_original - accuracy_swapped,
        per_label_accuracy=per_label,
    )


def swap_probe_runs(params: ModelParams, vocab: Vocab, dataset: PairTaskDataset,
                    cfg: FinetuneConfig | None = None, seeds: Sequence[int] = (0,),
                    scheme_name: str = "") -> ProbeReport:
    """Average the probe over several fine-tune seeds (paired across checkpoints)."""
    reports = [swap_probe(params, vocab, dataset, cfg, seed, scheme_name) for seed in seeds]
    per_label = {
        key: float(np.mean([r.per_label_accuracy[key] for r in reports]))
        for key in reports[0].per_label_accuracy
    }
    accuracy_original = float(np.mean([r.accuracy_original for r in reports]))
    accuracy_swapped = float(np.mean([r.accuracy_swapped for r in reports]))
    return ProbeReport(
        scheme=scheme_name,
        n=reports[0].n,
        accuracy_original=accuracy_original,
        accuracy_swapped=accuracy_swapped,
        delta=accuracy_original - accuracy_swapped,
        per_label_accuracy=per_label,
        runs=len(reports),
    )


# ---------------------------------------------------------------------------
# Synthetic corpus


@dataclass(frozen=True)
class SyntheticConfig:
    docs: int = 120
    sentences_per_doc: int = 12
    topic_pool: int = 8
    chain_pool: int = 30
    filler_pool: int = 50
    fillers_per_sentence: int = 1
    pair_train: int = 2000
    pair_dev: int = 500
    dev_pair_fraction: float = 0.2
    # Position markers repeat with this period. A small period keeps the
    # marker-pair table a desk-scale model can learn quickly; chain tokens
    # still disambiguate adjacency, so order stays decidable.
    ordinal_period: int = 3


def make_synthetic_corpus(cfg: SyntheticConfig, seed: int) -> tuple[CorpusStore, PairTaskDataset]:
    """Generate an order-learnable corpus and a matching binary pair task.

    The pair task presents two chain tokens in sentence A and the same two
    tokens in sentence B, either in the same order (label 0) or reversed
    (label 1), so the label depends only on argument order across the two
    sentences. Train and dev use disjoint token pairs.
    """
    if cfg.chain_pool < cfg.sentences_per_doc + 1:
        raise FatalError(
            f"chain_pool ({cfg.chain_pool}) must be at least sentences_per_doc + 1 "
            f"({cfg.sentences_per_doc + 1}) to build distinct chains"
        )
    if cfg.docs < 2 or cfg.sentences_per_doc < 2:
        raise FatalError("need at least 2 documents of 2 sentences each")
    if 0 < cfg.ordinal_period < 3:
        raise FatalError("ordinal_period below 3 makes forward and backward "
                         "marker patterns collide")
    if cfg.topic_pool < 2:
        raise FatalError("topic_pool must be at least 2 to separate documents")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    period = cfg.ordinal_period if cfg.ordinal_period > 0 else cfg.sentences_per_doc
    ordinals = [f"pos{i % period:02d}" for i in range(cfg.sentences_per_doc)]
    topic_tokens = [f"s{seed}t{k:02d}" for k in range(cfg.topic_pool)]
    chain_tokens = [f"s{seed}e{k:03d}" for k in range(cfg.chain_pool)]
    fillers = [f"w{k:02d}" for k in range(cfg.filler_pool)]

    documents = []
    for d in range(cfg.docs):
        topic = topic_tokens[int(rng.integers(cfg.topic_pool))]
        chain = rng.choice(cfg.chain_pool, size=cfg.sentences_per_doc + 1, replace=False)
        sentences = []
        for i in range(cfg.sentences_per_doc):
            noise = rng.integers(cfg.filler_pool, size=cfg.fillers_per_sentence)
            words = [ordinals[i], topic, chain_tokens[chain[i]], chain_tokens[chain[i + 1]]]
            words += [fillers[j] for j in noise]
            sentences.append(" ".join(words))
        documents.append(Document(id=d, sentences=tuple(sentences)))
    store = CorpusStore(tuple(documents))

    pairs = list(itertools.combinations(range(cfg.chain_pool), 2))
    rng.shuffle(pairs)
    n_dev_pairs = max(1, int(len(pairs) * cfg.dev_pair_fraction))
    dev_pairs, train_pairs = pairs[:n_dev_pairs], pairs[n_dev_pairs:]
    if not train_pairs:
        raise FatalError("chain_pool too small to split pair task into train and dev")

    def build_split(source_pairs, count):
        labels = np.zeros(count, dtype=np.int64)
        labels[: count // 2] = 1
        rng.shuffle(labels)
        examples = []
        for label in labels:
            u, v = source_pairs[int(rng.integers(len(source_pairs)))]
            if rng.random() < 0.5:
                u, v = v, u
            first, second = chain_tokens[u], chain_tokens[v]
            a = f"{first} {second} {fillers[int(rng.integers(cfg.filler_pool))]}"
            if label:
                b = f"{second} {first} {fillers[int(rng.integers(cfg.filler_pool))]}"
            else:
                b = f"{first} {second} {fillers[int(rng.integers(cfg.filler_pool))]}"
            examples.append((a, b, int(label)))
        return tuple(examples)

    dataset = PairTaskDataset(
        train=build_split(train_pairs, cfg.pair_train),
        dev=build_split(dev_pairs, cfg.pair_dev),
    )
    return store, dataset


def relation_rule(sentence_a: str, sentence_b: str, ordinal_period: int = 3) -> OrderLabel:
    """The generator's own order rule, usable as an oracle over its output.

    Within a document, sentences carry the same topic token, adjacent
    sentences share exactly one chain token, and position markers advance by
    the sentence distance (modulo the generator's marker period). Anything
    that matches no in-document pattern classifies as OTHER_DOC; rare
    cross-document topic-and-marker collisions are outside this rule's
    contract.
    """

    def parse(sentence: str) -> tuple[int, str | None, set[str]]:
        ordinal = None
        topic = None
        chains = set()
        for token in sentence.split():
            m = _ORDINAL_RE.match(token)
            if m:
                ordinal = int(m.group(1))
            elif _TOPIC_RE.match(token):
                topic = token
            elif _CHAIN_RE.match(token):
                chains.add(token)
        if ordinal is None:
            raise ValueError(f"not a generated sentence (no position marker): {sentence!r}")
        return ordinal, topic, chains

    ord_a, topic_a, chains_a = parse(sentence_a)
    ord_b, topic_b, chains_b = parse(sentence_b)
    same_topic = topic_a == topic_b and topic_a is not None
    shared_chain = bool(chains_a & chains_b)

    def advances_by(delta: int) -> bool:
        if ordinal_period > 0:
            return (ord_b - ord_a - delta) % ordinal_period == 0
        return ord_b - ord_a == delta

    if same_topic and shared_chain and advances_by(1):
        return OrderLabel.NEXT
    if same_topic and shared_chain and advances_by(-1):
        return OrderLabel.PREV
    if same_topic and not shared_chain and advances_by(2):
        return OrderLabel.NEXT_SKIP
    if same_topic and not shared_chain and advances_by(-2):
        return OrderLabel.PREV_SKIP
    return OrderLabel.OTHER_DOC

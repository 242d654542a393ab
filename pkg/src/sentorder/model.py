"""Transformer encoder with an order-classification head and a masked-word head.

The architecture is the standard bidirectional encoder: token + segment +
learned position embeddings, post-norm attention/feed-forward blocks, a
tanh-pooled first-position state feeding the order head, and a masked-word
head whose output projection is tied to the token embedding. The order head
width follows the active classification scheme.
"""

from __future__ import annotations

import collections
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from ._serial import read_container, write_container
from .autodiff import Tensor
from .errors import FatalError
from .sampler import OrderLabel, PairExample
from .vocab import PAD_ID

CHECKPOINT_MAGIC = b"SOCK"
CHECKPOINT_VERSION = 1

# Diagnostic counters (e.g. batches that carried no masked positions).
COUNTERS: collections.Counter[str] = collections.Counter()


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    ffn: int = 256
    max_position: int = 128
    type_vocab: int = 2
    num_order_classes: int = 3
    dropout: float = 0.1

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0,1), got {self.dropout}")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """The full, frozen name -> shape map; checkpoints carry exactly these."""
    h, f, v, c = cfg.hidden, cfg.ffn, cfg.vocab_size, cfg.num_order_classes
    shapes: dict[str, tuple[int, ...]] = {
        "embed.token": (v, h),
        "embed.position": (cfg.max_position, h),
        "embed.segment": (cfg.type_vocab, h),
        "embed.norm.gain": (h,),
        "embed.norm.bias": (h,),
        "pooler.weight": (h, h),
        "pooler.bias": (h,),
        "order.weight": (h, c),
        "order.bias": (c,),
        "mlm.transform.weight": (h, h),
        "mlm.transform.bias": (h,),
        "mlm.norm.gain": (h,),
        "mlm.norm.bias": (h,),
        "mlm.output.bias": (v,),
    }
    for i in range(cfg.layers):
        for proj in ("q", "k", "v"):
            shapes[f"layer{i}.attn.{proj}.weight"] = (h, h)
            if proj != "k":
                # A key bias shifts every score in a softmax row by the same
                # constant, so it can never carry gradient; it is omitted.
                shapes[f"layer{i}.attn.{proj}.bias"] = (h,)
        shapes[f"layer{i}.attn.out.weight"] = (h, h)
        shapes[f"layer{i}.attn.out.bias"] = (h,)
        shapes[f"layer{i}.attn.norm.gain"] = (h,)
        shapes[f"layer{i}.attn.norm.bias"] = (h,)
        shapes[f"layer{i}.ffn.in.weight"] = (h, f)
        shapes[f"layer{i}.ffn.in.bias"] = (f,)
        shapes[f"layer{i}.ffn.out.weight"] = (f, h)
        shapes[f"layer{i}.ffn.out.bias"] = (h,)
        shapes[f"layer{i}.ffn.norm.gain"] = (h,)
        shapes[f"layer{i}.ffn.norm.bias"] = (h,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Initialize weights at N(0, 0.02), gains at 1, biases at 0."""
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        tensors[name] = Tensor(data)
    return ModelParams(cfg, tensors)


def clone_params(params: ModelParams) -> ModelParams:
    return ModelParams(params.config,
                       {name: Tensor(t.data.copy()) for name, t in params.tensors.items()})


@dataclass
class Batch:
    """Padded arrays for one forward pass."""

    ids: np.ndarray                      # [B, T] int
    segments: np.ndarray                 # [B, T] int
    mask: np.ndarray                     # [B, T] 1.0 for real tokens, 0.0 for padding
    mlm_positions: np.ndarray | None = None   # [M] flat indices into the [B*T] layout
    mlm_labels: np.ndarray | None = None       # [M] original token ids
    targets: np.ndarray | None = None          # [B, C]
    labels: tuple[OrderLabel, ...] = ()


def pad_batch(examples: Sequence[PairExample]) -> Batch:
    if not examples:
        raise ValueError("empty batch")
    widths = {len(ex.target) for ex in examples}
    if len(widths) != 1:
        raise ValueError(f"mixed target widths in batch: {sorted(widths)}")
    bsz = len(examples)
    t = max(len(ex.tokens) for ex in examples)
    ids = np.full((bsz, t), PAD_ID, dtype=np.int64)
    segments = np.zeros((bsz, t), dtype=np.int64)
    mask = np.zeros((bsz, t), dtype=np.float64)
    positions, labels = [], []
    for i, ex in enumerate(examples):
        n = len(ex.tokens)
        ids[i, :n] = ex.tokens
        segments[i, :n] = ex.segment_ids
        mask[i, :n] = 1.0
        positions.append(ex.mlm_positions + i * t)
        labels.append(ex.mlm_labels)
    return Batch(
        ids=ids,
        segments=segments,
        mask=mask,
        mlm_positions=np.concatenate(positions) if positions else None,
        mlm_labels=np.concatenate(labels) if labels else None,
        targets=np.stack([ex.target for ex in examples]),
        labels=tuple(ex.label for ex in examples),
    )


class ForwardOut(NamedTuple):
    mlm_logits: Tensor | None   # [M, vocab], rows aligned with batch.mlm_positions
    order_logits: Tensor        # [B, num_order_classes]


def _affine_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm(x), gain), bias)


def _linear(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    return ad.add(ad.matmul(x, p[f"{prefix}.weight"]), p[f"{prefix}.bias"])


def _encoder(params: ModelParams, batch: Batch, train: bool,
             rng: np.random.Generator | None) -> tuple[Tensor, Tensor, Tensor]:
    cfg, p = params.config, params.tensors
    bsz, t = batch.ids.shape
    if t > cfg.max_position:
        raise FatalError(f"sequence length {t} exceeds max_position {cfg.max_position}")
    if train and rng is None:
        raise ValueError("training forward pass needs an rng for dropout")
    heads, dh = cfg.heads, cfg.hidden // cfg.heads
    rate = cfg.dropout

    x = ad.add(
        ad.add(ad.embedding_lookup(p["embed.token"], batch.ids),
               ad.embedding_lookup(p["embed.segment"], batch.segments)),
        ad.embedding_lookup(p["embed.position"], np.arange(t)),
    )
    x = _affine_norm(x, p["embed.norm.gain"], p["embed.norm.bias"])
    x = ad.dropout(x, rate, rng, train)

    # Keys at padded positions are excluded from every attention row.
    attn_bias = np.where(batch.mask[:, None, None, :] > 0.0, 0.0, ad.MASKED_OUT)

    for i in range(cfg.layers):
        def split(tensor):
            return ad.transpose(ad.reshape(tensor, (bsz, t, heads, dh)), (0, 2, 1, 3))

        q = split(_linear(x, p, f"layer{i}.attn.q"))
        k = split(ad.matmul(x, p[f"layer{i}.attn.k.weight"]))
        v = split(_linear(x, p, f"layer{i}.attn.v"))
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        probs = ad.dropout(ad.softmax(ad.add(scores, attn_bias)), rate, rng, train)
        ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (bsz, t, cfg.hidden))
        attn_out = ad.dropout(_linear(ctx, p, f"layer{i}.attn.out"), rate, rng, train)
        x = _affine_norm(ad.add(x, attn_out),
                         p[f"layer{i}.attn.norm.gain"], p[f"layer{i}.attn.norm.bias"])

        ffn = ad.gelu(_linear(x, p, f"layer{i}.ffn.in"))
        ffn = ad.dropout(_linear(ffn, p, f"layer{i}.ffn.out"), rate, rng, train)
        x = _affine_norm(ad.add(x, ffn),
                         p[f"layer{i}.ffn.norm.gain"], p[f"layer{i}.ffn.norm.bias"])

    flat = ad.reshape(x, (bsz * t, cfg.hidden))
    first = ad.embedding_lookup(flat, np.arange(bsz) * t)
    pooled = ad.tanh(_linear(first, p, "pooler"))
    return x, pooled, flat


def encode(params: ModelParams, batch: Batch | Sequence[PairExample], train: bool = False,
           rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Hidden states [B,T,H] and the pooled first-position state [B,H]."""
    if not isinstance(batch, Batch):
        batch = pad_batch(batch)
    hidden, pooled, _ = _encoder(params, batch, train, rng)
    return hidden, pooled


def forward(params: ModelParams, batch: Batch | Sequence[PairExample], train: bool = False,
            rng: np.random.Generator | None = None) -> ForwardOut:
    """Order logits for every example and masked-word logits at the recorded positions."""
    if not isinstance(batch, Batch):
        batch = pad_batch(batch)
    p = params.tensors
    _, pooled, flat = _encoder(params, batch, train, rng)
    order_logits = _linear(pooled, p, "order")

    mlm_logits = None
    if batch.mlm_positions is not None and batch.mlm_positions.size:
        rows = ad.embedding_lookup(flat, batch.mlm_positions)
        h = ad.gelu(_linear(rows, p, "mlm.transform"))
        h = _affine_norm(h, p["mlm.norm.gain"], p["mlm.norm.bias"])
        mlm_logits = ad.add(ad.matmul(h, ad.transpose(p["embed.token"], (1, 0))),
                            p["mlm.output.bias"])
    return ForwardOut(mlm_logits, order_logits)


def loss(mlm_logits: Tensor | None, mlm_labels: np.ndarray | None,
         order_logits: Tensor, targets: np.ndarray) -> tuple[Tensor, float, float]:
    """Total loss plus the two term values.

    The total is the mean masked-word cross entropy plus the mean order cross
    entropy, equally weighted. A batch with no masked positions contributes a
    zero masked-word term and bumps ``COUNTERS['mlm_empty_batches']``.
    """
    order_ce = ad.cross_entropy_with_soft_targets(order_logits, targets)
    if mlm_logits is None or mlm_labels is None or mlm_labels.size == 0:
        COUNTERS["mlm_empty_batches"] += 1
        mlm_ce = Tensor(0.0)
    else:
        onehot = np.zeros(mlm_logits.data.shape)
        onehot[np.arange(mlm_labels.size), mlm_labels] = 1.0
        mlm_ce = ad.cross_entropy_with_soft_targets(mlm_logits, onehot)
    total = ad.add(mlm_ce, order_ce)
    return total, mlm_ce.item(), order_ce.item()


def predict_order(params: ModelParams, example: PairExample) -> tuple[int, np.ndarray]:
    """Predicted class index (ties break to the lowest index) and probabilities."""
    out = forward(params, [example], train=False)
    logits = out.order_logits.data[0]
    z = np.exp(logits - logits.max())
    probs = z / z.sum()
    return int(np.argmax(logits)), probs


def batch_order_predictions(params: ModelParams, batch: Batch) -> np.ndarray:
    out = forward(params, batch, train=False)
    return np.argmax(out.order_logits.data, axis=-1)


def _config_header(cfg: ModelConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in sorted(dataclasses.asdict(cfg).items()))


def _config_from_header(header: str) -> ModelConfig:
    values: dict[str, str] = {}
    for line in header.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            values[key] = value
    kwargs = {}
    for field in dataclasses.fields(ModelConfig):
        if field.name not in values:
            raise FatalError(f"checkpoint header is missing config key {field.name!r}")
        raw = values[field.name]
        kwargs[field.name] = float(raw) if field.type == "float" else int(raw)
    return ModelConfig(**kwargs)


def save_checkpoint(path: str | Path, params: ModelParams) -> Path:
    """Write the named-tensor checkpoint; values are little-endian 8-byte floats."""
    arrays = {name: t.data for name, t in params.tensors.items()}
    return write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                           _config_header(params.config), arrays)


def load_checkpoint(path: str | Path) -> ModelParams:
    header, arrays = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    cfg = _config_from_header(header)
    expected = param_shapes(cfg)
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise FatalError(f"checkpoint tensor names do not match config "
                         f"(missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise FatalError(f"checkpoint tensor {name} has shape {arrays[name].shape}, "
                             f"expected {shape}")
    return ModelParams(cfg, {name: Tensor(arrays[name]) for name in expected})

"""Optimization loop: AdamW with warmup + linear decay and phased sequence lengths.

Training runs in one or more phases, each with its own maximum sequence
length; the example stream is re-created at every phase boundary while the
optimizer state carries over. Checkpoints are written at phase boundaries
and at the end, each as a model file plus a sidecar holding step count,
moment tensors, and random-stream states, so a run can resume bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as model_mod
from ._serial import read_container, write_container
from .autodiff import Tape, zero_grads
from .corpus import CorpusStore, filter_short_documents
from .errors import FatalError
from .model import ModelConfig, ModelParams, forward, loss, pad_batch
from .sampler import ExampleStream, MaskingConfig, OrderScheme, encode_store
from .vocab import Vocab

TRAINSTATE_MAGIC = b"SOTS"
TRAINSTATE_VERSION = 1

METRICS_HEADER = "step,lr,mlm_loss,order_loss,order_acc"


@dataclass(frozen=True)
class OptimizerConfig:
    lr_max: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-6

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"betas must be in (0,1), got {self.beta1}, {self.beta2}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass(frozen=True)
class SchedulePlan:
    total_steps: int
    warmup_fraction: float = 0.10
    phases: tuple[tuple[int, int], ...] = ()   # (steps, max_seq_len)

    def __post_init__(self):
        if not self.phases:
            raise ValueError("plan needs at least one phase")
        if sum(steps for steps, _ in self.phases) != self.total_steps:
            raise ValueError(f"phase steps {self.phases} do not sum to {self.total_steps}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError(f"warmup_fraction must be in (0,1), got {self.warmup_fraction}")


def single_phase(total_steps: int, max_seq_len: int, warmup_fraction: float = 0.10) -> SchedulePlan:
    return SchedulePlan(total_steps, warmup_fraction, ((total_steps, max_seq_len),))


# Reference settings for a full-size run: 50K short-sequence steps at length
# 128, then 40K at length 512.
FULL_SCALE_PLAN = SchedulePlan(90_000, 0.10, ((50_000, 128), (40_000, 512)))


def lr_at(step: int, plan: SchedulePlan, opt: OptimizerConfig) -> float:
    """Piecewise-linear rate: 0 -> lr_max over the warmup, then lr_max -> 0."""
    if not 0 <= step <= plan.total_steps:
        raise ValueError(f"step {step} outside [0, {plan.total_steps}]")
    warm = plan.warmup_fraction * plan.total_steps
    if step <= warm:
        return opt.lr_max * step / warm
    return opt.lr_max * (plan.total_steps - step) / (plan.total_steps - warm)


def decay_exempt(name: str) -> bool:
    """Biases and normalization gains are excluded from weight decay."""
    return name.endswith(".bias") or name.endswith(".gain")


@dataclass
class TrainState:
    step: int
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_train_state(params: ModelParams) -> TrainState:
    return TrainState(
        step=0,
        params=params,
        m={name: np.zeros_like(t.data) for name, t in params.tensors.items()},
        v={name: np.zeros_like(t.data) for name, t in params.tensors.items()},
    )


def adamw_step(state: TrainState, grads: dict[str, np.ndarray],
               opt: OptimizerConfig, lr: float) -> TrainState:
    """One bias-corrected Adam update with decoupled weight decay.

    Decay is applied after the Adam move and skipped for exempt parameters,
    so with zero gradients a decayed parameter shrinks by exactly
    ``lr * weight_decay`` per step while exempt ones stay put.
    """
    t = state.step + 1
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    for name, tensor in state.params.tensors.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FatalError(f"non-finite gradient for {name} at step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        tensor.data -= lr * update
        if opt.weight_decay and not decay_exempt(name):
            tensor.data -= lr * opt.weight_decay * tensor.data
    state.step = t
    return state


def _metrics_row(step: int, lr: float, mlm_loss: float, order_loss: float, acc: float) -> str:
    return f"{step},{lr:.10g},{mlm_loss:.10g},{order_loss:.10g},{acc:.6f}"


def save_train_state(path: str | Path, state: TrainState, phase_index: int,
                     stream_state: dict | None, dropout_state: dict) -> Path:
    header = json.dumps({
        "step": state.step,
        "phase_index": phase_index,
        "stream": stream_state,
        "dropout": dropout_state,
    }, sort_keys=True)
    arrays: dict[str, np.ndarray] = {}
    for name in state.params.tensors:
        arrays[f"m.{name}"] = state.m[name]
        arrays[f"v.{name}"] = state.v[name]
    return write_container(path, TRAINSTATE_MAGIC, TRAINSTATE_VERSION, header, arrays)


def load_train_state(path: str | Path, params: ModelParams) -> tuple[TrainState, dict]:
    header, arrays = read_container(Path(path), TRAINSTATE_MAGIC, TRAINSTATE_VERSION)
    meta = json.loads(header)
    m, v = {}, {}
    for name in params.tensors:
        try:
            m[name] = arrays[f"m.{name}"]
            v[name] = arrays[f"v.{name}"]
        except KeyError as exc:
            raise FatalError(f"optimizer state is missing moments for {name}") from exc
    state = TrainState(step=meta["step"], params=params, m=m, v=v)
    return state, meta


def _checkpoint_paths(out_dir: Path, tag: str) -> tuple[Path, Path]:
    return out_dir / f"checkpoint-{tag}.model", out_dir / f"checkpoint-{tag}.train"


def pretrain(store: CorpusStore, vocab: Vocab, scheme: OrderScheme, model_cfg: ModelConfig,
             opt: OptimizerConfig, plan: SchedulePlan, seed: int, out_dir: str | Path, *,
             batch_size: int = 32, metrics_every: int = 20,
             masking: MaskingConfig | None = None, workers: int = 1,
             resume_from: str | Path | None = None) -> Path:
    """Run the full pretraining loop; returns the final model checkpoint path.

    Deterministic for fixed inputs and seed: metrics and checkpoint files are
    byte-identical across reruns, and resuming from a saved checkpoint
    continues the exact metric stream of an uninterrupted run.
    """
    if model_cfg.vocab_size != len(vocab):
        raise FatalError(f"model vocab_size {model_cfg.vocab_size} != vocab size {len(vocab)}")
    if model_cfg.num_order_classes != scheme.num_classes:
        raise FatalError(f"model has {model_cfg.num_order_classes} order classes, "
                         f"scheme {scheme.kind} needs {scheme.num_classes}")
    max_phase_len = max(length for _, length in plan.phases)
    if max_phase_len > model_cfg.max_position:
        raise FatalError(f"phase length {max_phase_len} exceeds max_position "
                         f"{model_cfg.max_position}")
    masking = masking or MaskingConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    corpus = encode_store(filter_short_documents(store, scheme.min_sentences), vocab)

    if resume_from is not None:
        resume_from = Path(resume_from)
        params = model_mod.load_checkpoint(resume_from.with_suffix(".model"))
        state, meta = load_train_state(resume_from.with_suffix(".train"), params)
        dropout_rng = np.random.Generator(np.random.PCG64())
        dropout_rng.bit_generator.state = meta["dropout"]
        start_phase = meta["phase_index"]
        saved_stream = meta["stream"]
    else:
        root = np.random.SeedSequence(seed)
        init_ss, dropout_ss = root.spawn(2)
        params = model_mod.init_params(model_cfg, np.random.default_rng(init_ss))
        state = init_train_state(params)
        dropout_rng = np.random.default_rng(dropout_ss)
        start_phase = 0
        saved_stream = None

    def snapshot(tag: str, phase_index: int, stream: ExampleStream | None) -> None:
        model_path, train_path = _checkpoint_paths(out_dir, tag)
        model_mod.save_checkpoint(model_path, params)
        save_train_state(train_path, state, phase_index,
                         stream.state() if stream is not None else None,
                         dropout_rng.bit_generator.state)

    metrics_path = out_dir / "metrics.csv"
    with open(metrics_path, "w", encoding="utf-8") as metrics:
        metrics.write(METRICS_HEADER + "\n")

        boundary = 0
        for phase_index, (phase_steps, phase_len) in enumerate(plan.phases):
            boundary += phase_steps
            if phase_index < start_phase or state.step >= boundary:
                continue
            stream = ExampleStream(corpus, scheme, phase_len, masking, len(vocab),
                                   seed=[seed, phase_index], workers=workers)
            if saved_stream is not None and phase_index == start_phase:
                stream.set_state(saved_stream)
                saved_stream = None

            while state.step < boundary:
                step = state.step + 1
                lr = lr_at(step, plan, opt)
                examples = stream.take(batch_size)
                batch = pad_batch(examples)
                with Tape() as tape:
                    out = forward(params, batch, train=True, rng=dropout_rng)
                    total, mlm_val, order_val = loss(out.mlm_logits, batch.mlm_labels,
                                                     out.order_logits, batch.targets)
                    tape.backward(total)
                grads = {
                    name: t.grad if t.grad is not None else np.zeros_like(t.data)
                    for name, t in params.tensors.items()
                }
                acc = float(np.mean(np.argmax(out.order_logits.data, axis=-1)
                                    == np.argmax(batch.targets, axis=-1)))
                zero_grads(params.tensors.values())
                adamw_step(state, grads, opt, lr)
                if step % metrics_every == 0:
                    metrics.write(_metrics_row(step, lr, mlm_val, order_val, acc) + "\n")

            # Phase boundary checkpoint; the next phase needs no stream state.
            snapshot(f"step{state.step:07d}", phase_index + 1, None)

        if plan.total_steps == 0 or state.step == 0:
            snapshot("final", start_phase, None)
        else:
            snapshot("final", len(plan.phases), None)

    return _checkpoint_paths(out_dir, "final")[0]

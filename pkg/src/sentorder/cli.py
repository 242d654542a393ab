"""Single entry point wiring the pipeline stages into subcommands.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures. Runtime
failures print one machine-parsable ``fatal: <reason>`` line on stderr. The
thread budget is applied before numpy loads, which is why the stage
implementations are imported lazily inside their handlers.
"""

from __future__ import annotations

import argparse
import glob as globlib
import os
import sys
from pathlib import Path

THREADS_ENV = "SENTORDER_THREADS"

_MODEL_KEYS = ("layers", "heads", "hidden", "ffn", "max_position", "dropout")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(self._exit_with(message))

    @staticmethod
    def _exit_with(message: str) -> int:
        print(f"error: {message}", file=sys.stderr)
        return 1


def _apply_thread_budget(threads: int | None) -> None:
    budget = threads if threads is not None else os.environ.get(THREADS_ENV)
    if budget is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(budget))


def _write_resolved_config(out_dir: Path, settings: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={settings[key]}" for key in sorted(settings)]
    (out_dir / "config.resolved").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_kv_file(path: str) -> dict[str, str]:
    from .errors import FatalError

    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FatalError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    values: dict[str, str] = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FatalError(f"bad config line in {path}: {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _expand_inputs(patterns: list[str]) -> list[str]:
    paths: list[str] = []
    for pattern in patterns:
        matched = sorted(globlib.glob(pattern))
        paths.extend(matched if matched else [pattern])
    return paths


# ---------------------------------------------------------------------------
# Handlers


def _cmd_ingest(args) -> int:
    from .corpus import filter_short_documents, ingest, save_store

    store = ingest(_expand_inputs(args.input))
    store = filter_short_documents(store, args.min_sentences)
    out = Path(args.output)
    _write_resolved_config(out, {
        "command": "ingest", "input": ",".join(args.input),
        "min_sentences": args.min_sentences, "output": out,
    })
    save_store(store, out)
    print(f"ingested {len(store)} documents, {store.sentence_count} sentences -> {out}")
    return 0


def _cmd_build_vocab(args) -> int:
    from .corpus import load_store
    from .vocab import build_vocab, save_vocab

    store = load_store(args.store)
    vocab = build_vocab(store, args.size)
    save_vocab(vocab, args.output)
    print(f"built vocab of {len(vocab)} tokens -> {args.output}")
    return 0


def _cmd_sample(args) -> int:
    from .corpus import filter_short_documents, load_store
    from .sampler import ExampleStream, MaskingConfig, encode_store, get_scheme, write_examples
    from .vocab import load_vocab

    scheme = get_scheme(args.scheme)
    store = filter_short_documents(load_store(args.store), scheme.min_sentences)
    vocab = load_vocab(args.vocab)
    stream = ExampleStream(encode_store(store, vocab), scheme, args.max_len,
                           MaskingConfig(), len(vocab), seed=args.seed,
                           workers=args.workers)
    write_examples(args.output, stream.take(args.count), scheme)
    print(f"wrote {args.count} {scheme.kind} examples -> {args.output}")
    return 0


def _cmd_pretrain(args) -> int:
    from .corpus import load_store
    from .errors import FatalError
    from .model import ModelConfig
    from .sampler import get_scheme
    from .train import OptimizerConfig, SchedulePlan, pretrain
    from .vocab import load_vocab

    store = load_store(args.store)
    vocab = load_vocab(args.vocab)
    scheme = get_scheme(args.scheme)

    model_kwargs: dict = {}
    if args.config:
        file_values = _parse_kv_file(args.config)
        for key, value in file_values.items():
            if key not in _MODEL_KEYS:
                raise FatalError(f"unknown model config key {key!r} in {args.config}")
            model_kwargs[key] = float(value) if key == "dropout" else int(value)
    for key in _MODEL_KEYS:
        override = getattr(args, key)
        if override is not None:
            model_kwargs[key] = override

    if args.phases:
        phases = []
        for part in args.phases.split(","):
            length, _, steps = part.partition(":")
            try:
                phases.append((int(steps), int(length)))
            except ValueError:
                raise UsageError(f"bad --phases entry {part!r}; expected LEN:STEPS") from None
        total = sum(steps for steps, _ in phases)
        if args.steps is not None and args.steps != total:
            raise UsageError(f"--steps {args.steps} does not match --phases total {total}")
    else:
        if args.steps is None:
            raise UsageError("one of --steps or --phases is required")
        total = args.steps
        phases = [(total, args.max_len)]

    longest = max(length for _, length in phases)
    model_kwargs.setdefault("max_position", max(longest, 128))
    cfg = ModelConfig(vocab_size=len(vocab), num_order_classes=scheme.num_classes,
                      **model_kwargs)
    plan = SchedulePlan(total, args.warmup, tuple(phases))
    opt = OptimizerConfig(lr_max=args.lr)

    out = Path(args.out)
    _write_resolved_config(out, {
        "command": "pretrain", "store": args.store, "vocab": args.vocab,
        "scheme": scheme.kind, "steps": total,
        "phases": ",".join(f"{length}:{steps}" for steps, length in phases),
        "warmup": args.warmup, "lr": args.lr, "seed": args.seed,
        "batch_size": args.batch_size, "metrics_every": args.metrics_every,
        "workers": args.workers,
        **{f"model.{k}": getattr(cfg, k) for k in
           ("layers", "heads", "hidden", "ffn", "max_position", "dropout",
            "vocab_size", "num_order_classes")},
    })
    final = pretrain(store, vocab, scheme, cfg, opt, plan, args.seed, out,
                     batch_size=args.batch_size, metrics_every=args.metrics_every,
                     workers=args.workers, resume_from=args.resume)
    print(f"final checkpoint -> {final}")
    return 0


def _cmd_eval_order(args) -> int:
    from .evaluate import order_accuracy, save_report
    from .model import load_checkpoint
    from .sampler import read_examples

    params = load_checkpoint(args.checkpoint)
    examples, scheme = read_examples(args.examples)
    report = order_accuracy(params, examples, scheme)
    save_report(args.out, report)
    print(f"order accuracy {report.accuracy_original:.4f} on {report.n} examples "
          f"({scheme.kind}) -> {args.out}")
    return 0


def _cmd_probe_swap(args) -> int:
    from .evaluate import FinetuneConfig, load_pair_dataset, save_report, swap_probe_runs
    from .model import load_checkpoint
    from .vocab import load_vocab

    params = load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    dataset = load_pair_dataset(args.dataset)
    cfg = FinetuneConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size)
    seeds = [args.seed + i for i in range(args.runs)]
    report = swap_probe_runs(params, vocab, dataset, cfg, seeds,
                             scheme_name=args.scheme_name)
    save_report(args.out, report)
    print(f"probe accuracy {report.accuracy_original:.4f} original / "
          f"{report.accuracy_swapped:.4f} swapped (delta {report.delta:+.4f}, "
          f"{report.runs} runs) -> {args.out}")
    return 0


def _cmd_make_synthetic(args) -> int:
    from .corpus import serialize
    from .evaluate import SyntheticConfig, make_synthetic_corpus, save_pair_dataset

    cfg = SyntheticConfig(
        docs=args.docs, sentences_per_doc=args.sentences,
        chain_pool=args.chain_pool, filler_pool=args.filler_pool,
        pair_train=args.pair_train, pair_dev=args.pair_dev,
    )
    store, dataset = make_synthetic_corpus(cfg, args.seed)
    out = Path(args.out)
    _write_resolved_config(out, {
        "command": "make-synthetic", "docs": args.docs, "sentences": args.sentences,
        "chain_pool": args.chain_pool, "filler_pool": args.filler_pool,
        "pair_train": args.pair_train, "pair_dev": args.pair_dev, "seed": args.seed,
    })
    (out / "corpus.txt").write_text(serialize(store), encoding="utf-8")
    save_pair_dataset(out / "pairs.tsv", dataset)
    print(f"wrote {len(store)} documents and {len(dataset.train)}+{len(dataset.dev)} "
          f"pair examples -> {out}")
    return 0


def _cmd_grad_check(args) -> int:
    from .gradcheck import run_suite

    failures = run_suite(eps=args.eps, print_fn=print)
    if failures:
        from .errors import FatalError

        raise FatalError(f"gradient check failed for: {', '.join(failures)}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sentorder",
                     description="Sentence-order pretraining toolkit.")
    parser.add_argument("--threads", type=int, default=None,
                        help=f"thread budget (default from ${THREADS_ENV})")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("ingest", help="read raw text files into a document store")
    p.add_argument("--input", nargs="+", required=True, help="input files or globs")
    p.add_argument("--min-sentences", type=int, default=1)
    p.add_argument("--output", required=True, help="store directory to create")
    p.set_defaults(run=_cmd_ingest)

    p = sub.add_parser("build-vocab", help="build a frequency vocabulary from a store")
    p.add_argument("--store", required=True)
    p.add_argument("--size", type=int, default=8192)
    p.add_argument("--output", required=True)
    p.set_defaults(run=_cmd_build_vocab)

    p = sub.add_parser("sample", help="materialize training examples")
    p.add_argument("--store", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--scheme", required=True, choices=["nsp2", "pn3", "pn5", "pnsmth"])
    p.add_argument("--max-len", type=int, default=128)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--output", required=True)
    p.set_defaults(run=_cmd_sample)

    p = sub.add_parser("pretrain", help="run the pretraining loop")
    p.add_argument("--store", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--scheme", required=True, choices=["nsp2", "pn3", "pn5", "pnsmth"])
    p.add_argument("--config", help="key=value file with model dimensions")
    p.add_argument("--steps", type=int)
    p.add_argument("--warmup", type=float, default=0.10)
    p.add_argument("--phases", help="comma list of LEN:STEPS, e.g. 128:50000,512:40000")
    p.add_argument("--max-len", type=int, default=128,
                   help="sequence length when --phases is not given")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--metrics-every", type=int, default=20)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--resume", help="checkpoint file to resume from")
    p.add_argument("--out", required=True)
    for key in _MODEL_KEYS:
        kind = float if key == "dropout" else int
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind, default=None)
    p.set_defaults(run=_cmd_pretrain)

    p = sub.add_parser("eval-order", help="order-classification accuracy on saved examples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--examples", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(run=_cmd_eval_order)

    p = sub.add_parser("probe-swap", help="input-swap sensitivity probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=2e-5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--scheme-name", default="", help="label for the report")
    p.add_argument("--out", required=True)
    p.set_defaults(run=_cmd_probe_swap)

    p = sub.add_parser("make-synthetic", help="generate an order-learnable corpus")
    p.add_argument("--docs", type=int, default=120)
    p.add_argument("--sentences", type=int, default=12)
    p.add_argument("--chain-pool", type=int, default=30)
    p.add_argument("--filler-pool", type=int, default=50)
    p.add_argument("--pair-train", type=int, default=2000)
    p.add_argument("--pair-dev", type=int, default=500)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(run=_cmd_make_synthetic)

    p = sub.add_parser("grad-check", help="finite-difference check of every gradient path")
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(run=_cmd_grad_check)

    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_help()
        return 1
    _apply_thread_budget(args.threads)
    from .errors import FatalError

    try:
        return args.run(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FatalError as exc:
        print(f"fatal: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())

"""Command-line entry point: ``txl <subcommand> ...``.

Exit codes: 0 ok, 1 usage or bad configuration, 2 runtime error,
3 numeric failure (non-finite values).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import tomli

from . import numerics as nx
from .corpus import Corpus, Vocab, load_corpus, make_lag_blocks, make_synthetic_lag_corpus, stdlib_docs_text
from .errors import ConfigError
from .evaluator import LossTable, bench_speed, eval_segments, eval_vanilla_sliding, eval_xl, export_losses
from .model import ModelConfig, init_model, load_checkpoint
from .recl import ModelGroup, ReclConfig, recl_search
from .sampler import generate
from .trainer import TrainConfig, load_training_checkpoint, train_loop

log = logging.getLogger("txl")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_NUMERIC = 0, 1, 2, 3

MODEL_KEYS = {
    "n_layers", "d_model", "n_heads", "d_head", "d_ff", "segment_len", "mem_len_train",
    "mem_len_eval", "encoding", "recurrence", "loss_mode", "dropout", "tie_embeddings", "dtype",
}
TRAIN_KEYS = {
    "steps", "batch_lanes", "lr", "beta1", "beta2", "adam_eps", "weight_decay", "clip_norm",
    "warmup_steps", "schedule", "log_interval", "checkpoint_interval",
}
DATA_KEYS = {
    "data_path", "data_mode", "split", "synthetic", "lag_vocab", "lag_k", "lag_block_len",
    "lag_blocks", "lag_eval_len", "data_seed", "docs_bytes",
}
OTHER_KEYS = {"seed", "out_dir"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ config


def read_config(path) -> dict:
    """Flat TOML: every key at top level, see README for the schema."""
    with open(path, "rb") as fh:
        raw = tomli.load(fh)
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; found tables {nested}")
    unknown = set(raw) - MODEL_KEYS - TRAIN_KEYS - DATA_KEYS - OTHER_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return raw


def data_spec(raw: dict) -> dict:
    return {k: raw[k] for k in DATA_KEYS if k in raw}


def build_data(spec: dict) -> Corpus:
    """Materialize the corpus described by a data spec (file, docs text, or lag)."""
    seed = int(spec.get("data_seed", 0))
    kind = spec.get("synthetic")
    if kind == "lag":
        V, K = int(spec["lag_vocab"]), int(spec["lag_k"])
        block = int(spec.get("lag_block_len", 512))
        n = int(spec.get("lag_blocks", 100))
        ev = int(spec.get("lag_eval_len", 4096))
        alphabet = [chr(ord("a") + i) if i < 26 else chr(0x100 + i) for i in range(V)]
        return Corpus(
            Vocab("char", alphabet),
            make_lag_blocks(V, block, K, n, seed),
            make_synthetic_lag_corpus(V, ev, K, seed + 1_000_003),
            make_synthetic_lag_corpus(V, ev, K, seed + 2_000_003),
        )
    split = tuple(spec.get("split", (0.9, 0.05, 0.05)))
    mode = spec.get("data_mode", "char")
    if kind == "docs":
        import tempfile

        text = stdlib_docs_text(int(spec.get("docs_bytes", 2_000_000)))
        with tempfile.NamedTemporaryFile("w", suffix=".txt", delete=False, encoding="utf-8") as fh:
            fh.write(text)
        try:
            return load_corpus(fh.name, mode, split)
        finally:
            Path(fh.name).unlink()
    if kind is not None:
        raise ConfigError(f"unknown synthetic corpus {kind!r}")
    if "data_path" not in spec:
        raise ConfigError("config needs data_path or synthetic")
    return load_corpus(spec["data_path"], mode, split)


def _stream_for(args, meta) -> tuple[np.ndarray, Vocab]:
    if args.data:
        spec = {"data_path": args.data, "data_mode": args.data_mode}
        if "split" in meta.get("data", {}):
            spec["split"] = meta["data"]["split"]
        corpus = build_data(spec)
    else:
        if "data" not in meta:
            raise ConfigError("checkpoint records no data spec; pass --data")
        corpus = build_data(meta["data"])
    vocab = Vocab.from_dict(meta["vocab"]) if "vocab" in meta else corpus.vocab
    stream = corpus.split(args.split)
    if args.data and vocab.symbols != corpus.vocab.symbols:
        stream = vocab.encode(corpus.vocab.decode(stream))
    if args.limit:
        stream = stream[: args.limit + 1]
    return stream, vocab


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _emit(obj, out=None) -> None:
    (out or sys.stdout).write(json.dumps(obj, sort_keys=True) + "\n")


# --------------------------------------------------------------- commands


def cmd_train(args) -> int:
    if args.resume:
        model, state, meta = load_training_checkpoint(args.resume)
        tcfg = TrainConfig.from_dict(meta["train_config"])
        if args.steps is not None:
            tcfg.steps = args.steps
        corpus = build_data(meta["data"])
        out_dir = Path(args.out or Path(args.resume).parent)
        batcher_state = meta["trainer"]["batcher"]
        meta = {k: meta[k] for k in ("data", "vocab") if k in meta}
    else:
        if not args.config:
            raise UsageError("train needs --config or --resume")
        raw = read_config(args.config)
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.steps is not None:
            raw["steps"] = args.steps
        spec = data_spec(raw)
        corpus = build_data(spec)
        seed = int(raw.get("seed", 0))
        mcfg = ModelConfig(vocab_size=corpus.vocab.size, seed=seed, **{k: raw[k] for k in MODEL_KEYS if k in raw})
        tcfg = TrainConfig(seed=seed, **{k: raw[k] for k in TRAIN_KEYS if k in raw})
        model = init_model(mcfg, seed)
        state, batcher_state = None, None
        out_dir = Path(args.out or raw.get("out_dir", "run"))
        meta = {"data": spec, "vocab": corpus.vocab.to_dict()}
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.jsonl", "a" if args.resume else "w") as fh:
        state, _ = train_loop(model, tcfg, corpus.train, out_dir, fh, state, batcher_state, meta)
    _emit({"checkpoint": str(out_dir / "final.txl"), "step": state.step})
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta, _ = load_checkpoint(args.checkpoint)
    stream, _ = _stream_for(args, meta)
    if args.mode == "xl":
        res = eval_xl(model, stream, mem_len=args.mem_len, segment_len=args.segment_len)
    elif args.score_all:
        res = eval_segments(model, stream, args.window or model.config.segment_len)
    else:
        res = eval_vanilla_sliding(model, stream, args.window or model.config.segment_len, batch_size=args.batch)
    _emit(res.summary())
    return EXIT_OK


def cmd_bench(args) -> int:
    model, meta, _ = load_checkpoint(args.checkpoint)
    stream, _ = _stream_for(args, meta)
    L = model.config.segment_len
    windows = _ints(args.windows) if args.windows else [2 * L, 4 * L, 8 * L]
    for row in bench_speed(model, stream, windows, vanilla_tokens=args.tokens, xl_tokens=args.xl_tokens):
        _emit(row)
    return EXIT_OK


def cmd_export(args) -> int:
    model, meta, _ = load_checkpoint(args.checkpoint)
    stream, _ = _stream_for(args, meta)
    mid = args.model_id or Path(args.checkpoint).stem
    L = model.config.segment_len
    contexts = _ints(args.contexts) if args.contexts else [k * L for k in range(1, 9)]
    table = export_losses(model, stream, contexts, mid, f"{args.split}:{stream.size}")
    table.save(args.out)
    _emit({"model_id": mid, "contexts": table.contexts, "count": table.count, "file": args.out})
    return EXIT_OK


def cmd_recl(args) -> int:
    group = ModelGroup([LossTable.load(p) for p in args.tables])
    init_c = args.initial_c if args.initial_c is not None else min(group.contexts)
    delta = args.delta if args.delta is not None else init_c
    cfg = ReclConfig(r=args.r, delta=delta, initial_c=init_c, threshold=args.threshold, max_c=args.max_c)
    ids = group.model_ids if args.model in (None, "all") else [args.model]
    for mid in ids:
        _emit(recl_search(group, mid, cfg).to_dict())
    return EXIT_OK


def cmd_generate(args) -> int:
    model, meta, _ = load_checkpoint(args.checkpoint)
    vocab = Vocab.from_dict(meta["vocab"]) if "vocab" in meta else Vocab("byte")
    if args.seed_text:
        text = sys.stdin.read() if args.seed_text == "-" else Path(args.seed_text).read_text(encoding="utf-8")
        seed_tokens = vocab.encode(text)
    else:
        args.limit = None
        stream, _ = _stream_for(args, meta)
        seed_tokens = stream[: args.seed_len]
    gen = generate(model, seed_tokens, args.n, top_k=args.top_k, temperature=args.temperature, seed=args.seed or 0)
    sys.stdout.write(vocab.decode(gen.tokens))
    sys.stdout.write("\n")
    return EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="txl", description="Segment-recurrent transformer language models on a desk.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def data_args(sp):
        sp.add_argument("--data", help="raw corpus file (default: the data recorded in the checkpoint)")
        sp.add_argument("--data-mode", default="char", choices=["char", "byte"])
        sp.add_argument("--split", default="valid", choices=["train", "valid", "test"])
        sp.add_argument("--limit", type=int, help="score only the first N targets")

    sp = sub.add_parser("train", help="train from a config file")
    sp.add_argument("--config")
    sp.add_argument("--resume", help="training checkpoint to continue from")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="bpc / perplexity of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    data_args(sp)
    sp.add_argument("--mode", default="xl", choices=["xl", "vanilla"])
    sp.add_argument("--mem-len", type=int)
    sp.add_argument("--segment-len", type=int)
    sp.add_argument("--window", type=int)
    sp.add_argument("--score-all", action="store_true", help="vanilla: independent windows, every position scored")
    sp.add_argument("--batch", type=int, default=1, help="vanilla: windows per forward")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="evaluation speed: memory reuse vs sliding windows")
    sp.add_argument("--checkpoint", required=True)
    data_args(sp)
    sp.add_argument("--windows", help="comma-separated context lengths (default 2L,4L,8L)")
    sp.add_argument("--tokens", type=int, default=64, help="vanilla positions timed per window")
    sp.add_argument("--xl-tokens", type=int, default=1024)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("export-losses", help="per-token losses at several context lengths")
    sp.add_argument("--checkpoint", required=True)
    data_args(sp)
    sp.add_argument("--contexts", help="comma-separated context lengths (default L,2L,...,8L)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--model-id")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("recl", help="relative effective context length of a model group")
    sp.add_argument("--tables", nargs="+", required=True)
    sp.add_argument("--model", help="model id, or 'all' (default)")
    sp.add_argument("--r", type=float, default=0.1)
    sp.add_argument("--delta", type=int)
    sp.add_argument("--initial-c", type=int)
    sp.add_argument("--max-c", type=int)
    sp.add_argument("--threshold", type=float, default=0.01)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_recl)

    sp = sub.add_parser("generate", help="sample text from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--seed-text", help="file with seed text, or '-' for stdin")
    data_args(sp)
    sp.add_argument("--seed-len", type=int, default=512)
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--top-k", type=int, default=40)
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_generate)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        # non-finite results are reported through NumericError instead
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, tomli.TOMLDecodeError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except nx.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, RuntimeError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

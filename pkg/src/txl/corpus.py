"""Corpus ingestion, vocabularies and contiguous segment batching."""
from __future__ import annotations

import ast
import os
import sysconfig
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, EndOfEpoch

UNK = "�"


@dataclass
class Vocab:
    """``byte`` mode is the fixed 256-symbol alphabet.

    ``char`` mode maps each symbol to its list index; vocabularies built from
    text end with an UNK symbol that absorbs unseen characters.
    """

    mode: str
    symbols: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode == "byte":
            self.symbols = list(range(256))
        elif self.mode != "char":
            raise ConfigError(f"vocab mode must be 'byte' or 'char', got {self.mode!r}")
        self._ids = {s: i for i, s in enumerate(self.symbols)}

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        syms = sorted(set(text) - {UNK})
        return cls("char", syms + [UNK])

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def unk_id(self) -> int | None:
        return self._ids.get(UNK) if self.mode == "char" else None

    def encode(self, data) -> np.ndarray:
        if self.mode == "byte":
            if isinstance(data, str):
                data = data.encode("utf-8")
            return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)
        unk = self.unk_id
        if unk is None:
            missing = set(data) - set(self._ids)
            if missing:
                raise ConfigError(f"symbols outside the vocabulary: {sorted(missing)[:5]}")
        return np.fromiter((self._ids.get(ch, unk) for ch in data), dtype=np.int64, count=len(data))

    def decode(self, ids) -> str:
        ids = [int(i) for i in ids]
        if self.mode == "byte":
            return bytes(ids).decode("utf-8", errors="replace")
        return "".join(self.symbols[i] for i in ids)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "symbols": self.symbols if self.mode == "char" else None}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(d["mode"], list(d.get("symbols") or []))


@dataclass
class Corpus:
    vocab: Vocab
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "valid", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)


def split_points(n: int, fractions: Sequence[float]) -> list[int]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    return [0, a, min(b, n), n]


def load_corpus(path, mode: str = "char", split_fractions=(0.9, 0.05, 0.05)) -> Corpus:
    """Contiguous train/valid/test split; in char mode the vocabulary comes from train only."""
    raw = Path(path).read_bytes()
    if mode == "byte":
        vocab = Vocab("byte")
        p = split_points(len(raw), split_fractions)
        ids = vocab.encode(raw)
        return Corpus(vocab, ids[p[0] : p[1]], ids[p[1] : p[2]], ids[p[2] : p[3]])
    if mode != "char":
        raise ConfigError(f"mode must be 'byte' or 'char', got {mode!r}")
    text = raw.decode("utf-8")
    p = split_points(len(text), split_fractions)
    parts = [text[p[i] : p[i + 1]] for i in range(3)]
    vocab = Vocab.from_text(parts[0])
    return Corpus(vocab, *(vocab.encode(s) for s in parts))


@dataclass
class SegmentBatch:
    inputs: np.ndarray  # [B, L']
    targets: np.ndarray  # [B, L']
    continuation: np.ndarray  # [B] bool; False on the first segment of an epoch


class SegmentBatcher:
    """Splits a stream into ``B`` contiguous lanes and walks them in lock-step.

    Each lane holds ``len(stream) // B`` tokens (tail remainder dropped).
    Inputs of consecutive segments are adjacent within a lane; targets are
    the inputs shifted by one, so a lane of ``n`` tokens yields ``n - 1``
    scored positions.
    """

    def __init__(self, stream, batch_lanes: int, segment_len: int):
        stream = np.asarray(stream, dtype=np.int64)
        if batch_lanes < 1 or segment_len < 1:
            raise ConfigError("batch_lanes and segment_len must be >= 1")
        lane_len = len(stream) // batch_lanes
        if lane_len < 2:
            raise ConfigError(f"stream of {len(stream)} tokens too short for {batch_lanes} lanes")
        self.lanes = stream[: lane_len * batch_lanes].reshape(batch_lanes, lane_len)
        self.segment_len = segment_len
        self.cursor = 0
        self.epoch = 0

    @property
    def batch_lanes(self) -> int:
        return self.lanes.shape[0]

    def __len__(self) -> int:
        n = self.lanes.shape[1] - 1
        return -(-n // self.segment_len)

    def reset(self) -> None:
        self.cursor = 0

    def next_batch(self) -> SegmentBatch:
        n = self.lanes.shape[1] - 1
        if self.cursor >= n:
            raise EndOfEpoch
        start = self.cursor
        end = min(start + self.segment_len, n)
        batch = SegmentBatch(
            self.lanes[:, start:end],
            self.lanes[:, start + 1 : end + 1],
            np.full(self.batch_lanes, start > 0),
        )
        self.cursor = end
        return batch

    def next_cycling(self) -> SegmentBatch:
        """Like :meth:`next_batch` but rolls into the next epoch when exhausted."""
        try:
            return self.next_batch()
        except EndOfEpoch:
            self.reset()
            self.epoch += 1
            return self.next_batch()

    def __iter__(self):
        while True:
            try:
                yield self.next_batch()
            except EndOfEpoch:
                return

    def state(self) -> dict:
        return {"cursor": self.cursor, "epoch": self.epoch}

    def load_state(self, state: dict) -> None:
        self.cursor = int(state["cursor"])
        self.epoch = int(state["epoch"])


def next_batch(batcher: SegmentBatcher) -> SegmentBatch:
    return batcher.next_batch()


def make_synthetic_lag_corpus(vocab_size: int, length: int, lag: int, seed: int = 0) -> np.ndarray:
    """Uniform tokens for ``t < lag``, then ``x[t] = x[t - lag]``."""
    if not 0 < lag < length:
        raise ConfigError(f"need 0 < lag < length, got lag={lag}, length={length}")
    rng = np.random.default_rng(seed)
    head = rng.integers(0, vocab_size, size=lag)
    reps = -(-length // lag)
    return np.tile(head, reps)[:length].astype(np.int64)


def make_lag_blocks(vocab_size: int, block_len: int, lag: int, n_blocks: int, seed: int = 0) -> np.ndarray:
    """Concatenate independent lag streams so that the only shared structure is the lag itself."""
    seeds = np.random.SeedSequence(seed).generate_state(n_blocks)
    return np.concatenate([make_synthetic_lag_corpus(vocab_size, block_len, lag, int(s)) for s in seeds])


def lag_predictable(length: int, lag: int) -> np.ndarray:
    """Mask over stream positions ``t`` whose value is fixed by ``t - lag``."""
    return np.arange(length) >= lag


def stdlib_docs_text(max_bytes: int = 2_000_000) -> str:
    """English prose from the interpreter's own documentation.

    Concatenates pydoc topic pages and module/class/function docstrings of
    the standard library in sorted path order, truncated to ``max_bytes``
    characters. Deterministic for a given Python installation.
    """
    parts: list[str] = []
    total = 0
    try:
        from pydoc_data.topics import topics

        for key in sorted(topics):
            parts.append(topics[key])
            total += len(topics[key])
    except ImportError:
        pass
    root = sysconfig.get_paths()["stdlib"]
    skip = {"test", "tests", "site-packages", "dist-packages", "idlelib", "lib2to3", "__pycache__"}
    for base, dirs, files in os.walk(root):
        dirs[:] = sorted(d for d in dirs if d not in skip)
        for name in sorted(files):
            if total >= max_bytes:
                break
            if not name.endswith(".py"):
                continue
            try:
                tree = ast.parse(Path(base, name).read_text(encoding="utf-8"))
            except (SyntaxError, UnicodeDecodeError, ValueError):
                continue
            for node in ast.walk(tree):
                if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                    doc = ast.get_docstring(node)
                    if doc:
                        parts.append(doc)
                        total += len(doc) + 2
    return "\n\n".join(parts)[:max_bytes]

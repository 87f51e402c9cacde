"""Evaluation regimes, speed benchmark and per-token loss export.

Every regime scores the targets ``stream[1:]`` exactly once, so per-token
arrays from different regimes line up position by position (index ``t-1``
holds the loss of ``stream[t]``).
"""
from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .model import RecurrentTransformer, forward_segment

LN2 = math.log(2.0)


@dataclass
class EvalResult:
    nll: np.ndarray  # per scored target, nats
    seconds: float = 0.0

    @property
    def mean_nll(self) -> float:
        return float(self.nll.mean()) if self.nll.size else float("nan")

    @property
    def bpc(self) -> float:
        return self.mean_nll / LN2

    @property
    def ppl(self) -> float:
        return math.exp(self.mean_nll)

    @property
    def tokens_per_s(self) -> float:
        return self.nll.size / self.seconds if self.seconds > 0 else float("inf")

    def summary(self) -> dict:
        return {"bpc": self.bpc, "ppl": self.ppl, "tokens": int(self.nll.size)}


def _check_stream(stream) -> np.ndarray:
    s = np.asarray(stream, dtype=np.int64)
    if s.ndim != 1 or s.size < 2:
        raise ConfigError("evaluation stream must be 1-d with at least 2 tokens")
    return s


def eval_xl(model: RecurrentTransformer, stream, mem_len: int | None = None, segment_len: int | None = None) -> EvalResult:
    """Consecutive segments with carried memory of length ``mem_len``."""
    s = _check_stream(stream)
    L = segment_len or model.config.segment_len
    M = model.config.mem_len_eval if mem_len is None else mem_len
    if M < 0 or L < 1:
        raise ConfigError("need mem_len >= 0 and segment_len >= 1")
    n = s.size - 1
    out = np.empty(n)
    mem = None
    t0 = time.perf_counter()
    with nx.no_grad():
        for start in range(0, n, L):
            end = min(start + L, n)
            res = forward_segment(model, s[start:end], mem, targets=s[start + 1 : end + 1], mem_len=M)
            out[start:end] = res.nll[0]
            mem = res.memory
    return EvalResult(out, time.perf_counter() - t0)


def eval_segments(model: RecurrentTransformer, stream, window: int) -> EvalResult:
    """Independent non-overlapping windows, every position scored (no memory)."""
    s = _check_stream(stream)
    n = s.size - 1
    out = np.empty(n)
    t0 = time.perf_counter()
    with nx.no_grad():
        for start in range(0, n, window):
            end = min(start + window, n)
            res = forward_segment(model, s[start:end], None, targets=s[start + 1 : end + 1], mem_len=0)
            out[start:end] = res.nll[0]
    return EvalResult(out, time.perf_counter() - t0)


def eval_vanilla_sliding(
    model: RecurrentTransformer,
    stream,
    window: int,
    batch_size: int = 1,
    limit: int | None = None,
) -> EvalResult:
    """One fresh forward per target over the preceding ``window`` tokens.

    Only the last position of each window is scored. ``batch_size > 1``
    stacks full-length windows into one forward for throughput; the
    per-token time is still wall-clock divided by positions. ``limit``
    scores only the first ``limit`` targets.
    """
    s = _check_stream(stream)
    if window < 1:
        raise ConfigError("window must be >= 1")
    n = s.size - 1 if limit is None else min(limit, s.size - 1)
    out = np.empty(n)
    empty = model.empty_memory()
    t0 = time.perf_counter()
    with nx.no_grad():
        t = 1
        while t <= n:
            if batch_size > 1 and t >= window:
                ts = np.arange(t, min(t + batch_size, n + 1))
                ctx = np.stack([s[u - window : u] for u in ts])
                res = forward_segment(model, ctx, empty, mem_len=0)
                last = res.logits.data[:, -1, :]
                out[ts - 1] = nx.token_nll(last, s[ts])
                t = ts[-1] + 1
                continue
            ctx = s[max(0, t - window) : t]
            res = forward_segment(model, ctx, empty, mem_len=0)
            out[t - 1] = nx.token_nll(res.logits.data[0, -1], s[t])
            t += 1
    return EvalResult(out, time.perf_counter() - t0)


# ------------------------------------------------------------------ bench


def _per_token(fn, warmup: int = 1, repeats: int = 3) -> float:
    for _ in range(warmup):
        fn()
    best = math.inf
    for _ in range(repeats):
        r = fn()
        best = min(best, r.seconds / r.nll.size)
    return best


def bench_speed(
    model: RecurrentTransformer,
    stream,
    windows: Sequence[int],
    vanilla_tokens: int = 64,
    xl_tokens: int | None = None,
    repeats: int = 3,
) -> list[dict]:
    """Per-token evaluation time of memory reuse vs unbatched sliding windows.

    For a window ``W`` the memory-reuse regime uses segment ``min(L, W)`` and
    memory ``W - segment`` so both regimes see the same attention span.
    Warmup runs are excluded; the best of ``repeats`` runs is reported.
    """
    s = _check_stream(stream)
    L = model.config.segment_len
    rows = []
    for W in windows:
        seg = min(L, W)
        xs = s if xl_tokens is None else s[: xl_tokens + 1]
        t_xl = _per_token(lambda: eval_xl(model, xs, mem_len=W - seg, segment_len=seg), repeats=repeats)
        # start late enough that every scored window is full-length
        vs = s[: W + vanilla_tokens + 1]
        t_van = _per_token(lambda: _full_windows(model, vs, W), repeats=repeats)
        rows.append({"regime": "xl", "context": W, "per_token_s": t_xl, "slowdown": 1.0})
        rows.append({"regime": "vanilla", "context": W, "per_token_s": t_van, "slowdown": t_van / t_xl})
    return rows


def _full_windows(model, s, W) -> EvalResult:
    n = s.size - 1 - W + 1
    out = np.empty(n)
    empty = model.empty_memory()
    t0 = time.perf_counter()
    with nx.no_grad():
        for i, t in enumerate(range(W, s.size)):
            res = forward_segment(model, s[t - W : t], empty, mem_len=0)
            out[i] = nx.token_nll(res.logits.data[0, -1], s[t])
    return EvalResult(out, time.perf_counter() - t0)


# ---------------------------------------------------------------- losses

LOSS_MAGIC = b"TXLLOSS\x00"
LOSS_VERSION = 1


@dataclass
class LossTable:
    """Per-token nll of one model at several context lengths over one stream."""

    model_id: str
    stream_id: str
    contexts: list
    losses: dict = field(default_factory=dict)  # context -> float64 [count]

    @property
    def count(self) -> int:
        return len(next(iter(self.losses.values()))) if self.losses else 0

    def at(self, c: int) -> np.ndarray:
        if c not in self.losses:
            raise ConfigError(f"loss table {self.model_id!r} has no context length {c}")
        return self.losses[c]

    def save(self, path) -> None:
        header = {
            "model_id": self.model_id,
            "stream_id": self.stream_id,
            "context_lengths": [int(c) for c in self.contexts],
            "count": self.count,
        }
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(LOSS_MAGIC)
            fh.write(struct.pack("<IQ", LOSS_VERSION, len(hb)))
            fh.write(hb)
            for c in self.contexts:
                fh.write(np.ascontiguousarray(self.losses[c], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "LossTable":
        with open(path, "rb") as fh:
            if fh.read(len(LOSS_MAGIC)) != LOSS_MAGIC:
                raise ConfigError(f"{path}: not a loss table")
            version, hlen = struct.unpack("<IQ", fh.read(12))
            if version != LOSS_VERSION:
                raise ConfigError(f"{path}: unsupported loss table version {version}")
            header = json.loads(fh.read(hlen).decode("utf-8"))
            n = header["count"]
            losses = {}
            for c in header["context_lengths"]:
                losses[c] = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64)
        return cls(header["model_id"], header["stream_id"], header["context_lengths"], losses)


def export_losses(
    model: RecurrentTransformer,
    stream,
    contexts: Sequence[int],
    model_id: str = "model",
    stream_id: str = "stream",
) -> LossTable:
    """Per-token nll with a configured context length ``c`` per token.

    ``c`` is realized as segment ``min(L, c)`` plus memory ``c - segment``.
    Inside a segment the realized span runs from ``c - segment + 1`` to
    ``c``; the table is keyed by the configured ``c``. A model without
    recurrence ignores the memory part.
    """
    contexts = [int(c) for c in contexts]
    if any(c < 1 for c in contexts):
        raise ConfigError("context lengths must be >= 1")
    if contexts != sorted(contexts):
        raise ConfigError("context lengths must be ascending")
    L = model.config.segment_len
    table = LossTable(model_id, stream_id, contexts)
    for c in contexts:
        seg = min(L, c)
        table.losses[c] = eval_xl(model, stream, mem_len=c - seg, segment_len=seg).nll
    return table

"""Autoregressive generation with memory carry and top-k sampling."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .model import RecurrentTransformer, forward_segment

MAX_SEED_TOKENS = 512


def top_k_distribution(logits: np.ndarray, k: int, temperature: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Renormalized distribution over the ``k`` largest logits after temperature.

    Returns ``(ids, probs)``; ties prefer the lower id.
    """
    if temperature <= 0:
        raise ConfigError("temperature must be > 0")
    z = np.asarray(logits, dtype=np.float64) / temperature
    ids = np.argsort(-z, kind="stable")[:k]
    sel = z[ids]
    e = np.exp(sel - sel.max())
    return ids, e / e.sum()


@dataclass
class StepRecord:
    ids: np.ndarray
    probs: np.ndarray
    token: int


@dataclass
class Generation:
    tokens: list
    steps: list = field(default_factory=list)
    max_memory: int = 0


def generate(
    model: RecurrentTransformer,
    seed_tokens,
    n_tokens: int,
    top_k: int = 40,
    temperature: float = 1.0,
    seed: int = 0,
    record: bool = False,
) -> Generation:
    """Sample ``n_tokens`` continuing ``seed_tokens`` (at most the last 512 are used).

    The seed is consumed in segments that fill the memory; every new token is
    then fed back alone (segment length 1) with memory carry. Without
    recurrence the model is re-run on the last ``segment_len`` tokens.
    """
    cfg = model.config
    seed_arr = np.asarray(seed_tokens, dtype=np.int64)
    if seed_arr.ndim != 1 or seed_arr.size == 0:
        raise ConfigError("seed must be a non-empty token sequence")
    seed_arr = seed_arr[-MAX_SEED_TOKENS:]
    if top_k < 1:
        raise ConfigError("top_k must be >= 1")
    if top_k > cfg.vocab_size:
        warnings.warn(f"top_k={top_k} exceeds vocabulary size {cfg.vocab_size}; clamping", stacklevel=2)
        top_k = cfg.vocab_size
    rng = np.random.default_rng(seed)
    M = cfg.mem_len_eval
    L = cfg.segment_len
    out = Generation([])
    history = list(seed_arr)

    with nx.no_grad():
        mem = None
        logits = None
        if cfg.recurrence:
            for start in range(0, seed_arr.size, L):
                res = forward_segment(model, seed_arr[start : start + L], mem, mem_len=M)
                mem = res.memory
                out.max_memory = max(out.max_memory, mem.length)
                logits = res.logits.data[0, -1]
        for _ in range(n_tokens):
            if not cfg.recurrence:
                res = forward_segment(model, np.asarray(history[-L:]), None)
                logits = res.logits.data[0, -1]
            ids, probs = top_k_distribution(logits, top_k, temperature)
            tok = int(ids[rng.choice(len(ids), p=probs)])
            if tok not in ids:
                raise AssertionError("sampled token outside the top-k set")
            if record:
                out.steps.append(StepRecord(ids, probs, tok))
            out.tokens.append(tok)
            history.append(tok)
            if cfg.recurrence:
                res = forward_segment(model, np.array([tok]), mem, mem_len=M)
                mem = res.memory
                out.max_memory = max(out.max_memory, mem.length)
                logits = res.logits.data[0, -1]
    return out

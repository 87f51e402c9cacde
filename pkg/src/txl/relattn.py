"""Relative positional attention and its absolute-encoding baseline.

Score layout everywhere is ``[..., L, M+L]``: rows are the ``L`` queries of
the current segment, columns the keys over ``[memory ∘ segment]``. Query ``i``
sits at extended position ``i + M`` and may attend key ``j`` iff ``j <= i + M``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .numerics import Tensor


@lru_cache(maxsize=32)
def _sinusoid(max_dist: int, d: int) -> np.ndarray:
    pos = np.arange(max_dist, dtype=np.float64)[:, None]
    inv_freq = 1.0 / (10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d))
    ang = pos * inv_freq[None, :]
    table = np.empty((max_dist, d), dtype=np.float64)
    table[:, 0::2] = np.sin(ang)
    table[:, 1::2] = np.cos(ang)
    table.flags.writeable = False
    return table


def sinusoid_table(max_dist: int, d: int) -> np.ndarray:
    """Row ``i`` encodes distance (or position) ``i``; interleaved sin/cos."""
    if d % 2:
        raise ConfigError(f"sinusoid table needs an even width, got {d}")
    if max_dist < 0:
        raise ConfigError("max_dist must be non-negative")
    return _sinusoid(int(max_dist), int(d))


def causal_mask(L: int, M: int) -> np.ndarray:
    i = np.arange(L)[:, None]
    j = np.arange(M + L)[None, :]
    return j <= i + M


@lru_cache(maxsize=64)
def _shift_index(L: int, S: int):
    M = S - L
    i = np.arange(L)[:, None]
    k = np.arange(S)[None, :]
    src = k + (L - 1 - i)
    valid = k <= M + i
    return np.minimum(src, S - 1), valid


def rel_shift(b_tilde) -> Tensor:
    """Left-shift row ``i`` of ``b_tilde`` by ``L-1-i`` and zero the tail.

    ``out[..., i, k] = b_tilde[..., i, k + L-1-i]`` for ``k <= M+i``, else 0.
    Turns per-row ``q_i . Q_k`` (``Q`` in reversed distance order) into the
    distance-aligned matrix of position terms.
    """
    b_tilde = nx.as_tensor(b_tilde)
    L, S = b_tilde.shape[-2:]
    if S < L:
        raise ValueError(f"rel_shift: need M+L >= L, got shape {b_tilde.shape}")
    idx, valid = _shift_index(L, S)
    return nx.gather_last(b_tilde, idx, valid)


def rel_scores_naive(
    q: np.ndarray,
    ext_keys: np.ndarray,
    r_proj_fn: Callable[[int], np.ndarray],
    u: np.ndarray,
    v: np.ndarray,
) -> np.ndarray:
    """Quadratic reference for the four-term relative score of one head.

    ``r_proj_fn(dist)`` returns the projected position key for a distance.
    It is called once per (query, key) pair. Entries with ``j > i + M``
    are left at 0.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(ext_keys, dtype=np.float64)
    L, S = q.shape[0], k.shape[0]
    M = S - L
    out = np.zeros((L, S))
    for i in range(L):
        for j in range(i + M + 1):
            r = np.asarray(r_proj_fn(i + M - j))
            out[i, j] = q[i] @ k[j] + q[i] @ r + u @ k[j] + v @ r
    return out


def position_keys(r_table: np.ndarray, w_kr: Tensor, S: int, n_heads: int) -> Tensor:
    """``Q[h, k] = (W_kR R_{S-1-k})`` split per head, shape ``[H, S, d_head]``."""
    if r_table.shape[0] < S:
        raise ConfigError(f"sinusoid table has {r_table.shape[0]} rows, need {S}")
    r_rev = Tensor(np.ascontiguousarray(r_table[S - 1 :: -1] if S else r_table[:0]), dtype=w_kr.dtype)
    Q = nx.matmul(r_rev, w_kr)
    d_head = w_kr.shape[1] // n_heads
    return nx.transpose(nx.reshape(Q, (S, n_heads, d_head)), (1, 0, 2))


def position_scores(q: Tensor, Q: Tensor, v: Tensor) -> Tensor:
    """Position-dependent score terms (b) + (d), already distance-aligned.

    ``q [B, H, L, dh]``, ``Q [H, S, dh]`` from :func:`position_keys`,
    ``v [H, dh]``. One matmul over ``S`` distances, then one shift.
    """
    B, H, L, dh = q.shape
    S = Q.shape[1]
    # (b): q Q^T, (d): (Q v)^T broadcast over query rows; both shifted the same way
    b_tilde = nx.matmul(q, nx.broadcast_to(nx.transpose(Q, (0, 2, 1)), (B, H, dh, S)))
    d_tilde = nx.reshape(nx.matmul(Q, nx.reshape(v, (H, dh, 1))), (1, H, 1, S))
    return rel_shift(nx.add(b_tilde, nx.broadcast_to(d_tilde, (B, H, L, S))))


def rel_scores_fast(
    q: Tensor,
    ext_keys: Tensor,
    r_table: np.ndarray,
    w_kr: Tensor,
    u: Tensor,
    v: Tensor,
) -> Tensor:
    """Four-term relative scores with one projection per distance.

    Shapes: ``q [B, H, L, dh]``, ``ext_keys [B, H, M+L, dh]``,
    ``w_kr [d, H*dh]``, ``u, v [H, dh]``; returns ``[B, H, L, M+L]``.
    Two-dimensional ``q``/``ext_keys`` (one head, no batch) are accepted too.
    Entries with ``j > i + M`` hold only the content terms; mask them.
    """
    squeeze = q.ndim == 2
    if squeeze:
        q = nx.reshape(q, (1, 1) + q.shape)
        ext_keys = nx.reshape(ext_keys, (1, 1) + ext_keys.shape)
        u = nx.reshape(u, (1, -1))
        v = nx.reshape(v, (1, -1))
    B, H, L, dh = q.shape
    S = ext_keys.shape[-2]

    Q = position_keys(r_table, w_kr, S, H)  # [H, S, dh]

    # (a) + (c): content addressing plus global content bias
    qu = nx.add(q, nx.broadcast_to(nx.reshape(u, (1, H, 1, dh)), q.shape))
    ac = nx.matmul(qu, nx.transpose(ext_keys, (0, 1, 3, 2)))

    bd = position_scores(q, Q, v)
    out = nx.add(ac, bd)
    return nx.reshape(out, (L, S)) if squeeze else out


# ------------------------------------------------------------------ params


@dataclass
class RelAttnParams:
    w_q: Tensor
    w_ke: Tensor
    w_kr: Tensor
    w_v: Tensor
    w_o: Tensor
    u: Tensor  # [H, d_head]
    v: Tensor  # [H, d_head]
    ln_gain: Tensor
    ln_bias: Tensor

    def named(self) -> dict[str, Tensor]:
        return dict(vars(self))


@dataclass
class AbsAttnParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln_gain: Tensor
    ln_bias: Tensor
    U: np.ndarray | None = None  # absolute table, not trained

    def named(self) -> dict[str, Tensor]:
        return {k: t for k, t in vars(self).items() if k != "U"}


def reuse_positions(M: int, L: int) -> np.ndarray:
    """Absolute-table rows seen by ``[memory ∘ segment]`` when states are reused.

    Every cached segment was encoded with the same rows ``0..L-1``, so
    extended position ``p`` carries row ``(p - M) mod L``.
    """
    return (np.arange(M + L) - M) % L


def abs_scores(q_in, ext_in, params: AbsAttnParams) -> Tensor:
    """Absolute-encoding scores ``((E+U) W_q)((E+U) W_k)^T`` for one head.

    ``q_in [L, d]`` and ``ext_in [M+L, d]`` are content rows; the table rows
    are added here following :func:`reuse_positions`.
    """
    q_in, ext_in = nx.as_tensor(q_in), nx.as_tensor(ext_in)
    L, S = q_in.shape[0], ext_in.shape[0]
    M = S - L
    if params.U is not None:
        U = np.asarray(params.U)
        q_in = nx.add(q_in, Tensor(U[:L]))
        ext_in = nx.add(ext_in, Tensor(U[reuse_positions(M, L)]))
    q = nx.matmul(q_in, params.w_q)
    k = nx.matmul(ext_in, params.w_k)
    return nx.matmul(q, nx.transpose(k, (1, 0)))


# --------------------------------------------------------------- sublayers


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, d = x.shape
    return nx.transpose(nx.reshape(x, (B, T, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, T, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (B, T, H * dh))


def _as_batched(h: Tensor, mem: Tensor | None):
    squeeze = h.ndim == 2
    if squeeze:
        h = nx.reshape(h, (1,) + h.shape)
        if mem is not None:
            mem = nx.reshape(mem, (1,) + mem.shape)
    if mem is None:
        mem = Tensor(np.zeros((h.shape[0], 0, h.shape[2]), dtype=h.dtype))
    return h, mem, squeeze


def attention_sublayer(
    h: Tensor,
    mem: Tensor | None,
    params: RelAttnParams | AbsAttnParams,
    n_heads: int,
    r_table: np.ndarray | None = None,
    mask: np.ndarray | None = None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    eps: float = 1e-5,
) -> Tensor:
    """One attention sublayer: queries from ``h``, keys/values from ``[mem ∘ h]``.

    ``h`` is ``[B, L, d]`` (or ``[L, d]``), ``mem`` ``[B, M, d]`` or None.
    ``mask`` defaults to the causal mask and may carry extra leading axes.
    The output is ``LayerNorm(Linear(attn) + h)``.
    """
    h, mem, squeeze = _as_batched(h, mem)
    B, L, d = h.shape
    M = mem.shape[1]
    d_head = d // n_heads
    ext = nx.concat([mem, h], axis=1) if M else h

    q = _split_heads(nx.matmul(h, params.w_q), n_heads)
    vals = _split_heads(nx.matmul(ext, params.w_v), n_heads)
    if isinstance(params, RelAttnParams):
        k = _split_heads(nx.matmul(ext, params.w_ke), n_heads)
        if r_table is None:
            r_table = sinusoid_table(M + L, d)
        scores = rel_scores_fast(q, k, r_table, params.w_kr, params.u, params.v)
    else:
        k = _split_heads(nx.matmul(ext, params.w_k), n_heads)
        scores = nx.matmul(q, nx.transpose(k, (0, 1, 3, 2)))
    scores = nx.scale(scores, 1.0 / math.sqrt(d_head))

    if mask is None:
        mask = causal_mask(L, M)
    probs = nx.masked_softmax(scores, mask)
    probs = nx.dropout(probs, dropout, rng)
    attn = _merge_heads(nx.matmul(probs, vals))
    out = nx.layer_norm(nx.add(nx.matmul(attn, params.w_o), h), params.ln_gain, params.ln_bias, eps)
    return nx.reshape(out, (L, d)) if squeeze else out

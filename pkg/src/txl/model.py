"""N-layer transformer language model with segment-level recurrence.

Layer ``n`` consumes ``[SG(mem_n) ∘ h^{n-1}]`` as key/value context and the
current ``h^{n-1}`` as queries; ``mem_n`` caches ``h^{n-1}`` from earlier
segments. With ``recurrence=False`` memory is never read or written, which
gives the fixed-context baseline.

Parameter names (also the checkpoint tensor names)::

    embedding                       [V, d]
    layers.{n}.attn.w_q             [d, d]
    layers.{n}.attn.w_ke            [d, d]   relative only
    layers.{n}.attn.w_kr            [d, d]   relative only
    layers.{n}.attn.w_k             [d, d]   absolute only
    layers.{n}.attn.w_v             [d, d]
    layers.{n}.attn.w_o             [d, d]
    layers.{n}.attn.u               [H, d_head]  relative only
    layers.{n}.attn.v               [H, d_head]  relative only
    layers.{n}.attn.ln_gain/ln_bias [d]
    layers.{n}.ff.w1 [d, d_ff]  .b1 [d_ff]  .w2 [d_ff, d]  .b2 [d]
    layers.{n}.ff.ln_gain/ln_bias   [d]
    out.weight                      [d, V]   only when embeddings are untied
    out.bias                        [V]
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import numerics as nx
from .errors import ConfigError, VocabError
from .numerics import Tensor
from .relattn import AbsAttnParams, RelAttnParams, attention_sublayer, causal_mask, sinusoid_table

ENCODINGS = ("relative", "absolute")
LOSS_MODES = ("full", "half")


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 2
    d_head: Optional[int] = None
    d_ff: int = 64
    segment_len: int = 16
    mem_len_train: Optional[int] = None
    mem_len_eval: Optional[int] = None
    encoding: str = "relative"
    recurrence: bool = True
    loss_mode: str = "full"
    dropout: float = 0.0
    tie_embeddings: bool = True
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_head is None and self.n_heads > 0:
            self.d_head = self.d_model // self.n_heads
        if self.mem_len_train is None:
            self.mem_len_train = self.segment_len
        if self.mem_len_eval is None:
            self.mem_len_eval = self.mem_len_train
        self.validate()

    def validate(self) -> None:
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")
        if self.n_layers < 0 or self.n_heads < 1 or self.d_model < 2:
            raise ConfigError("n_layers >= 0, n_heads >= 1, d_model >= 2 required")
        if self.n_heads * self.d_head != self.d_model:
            raise ConfigError(f"d_model ({self.d_model}) != n_heads * d_head ({self.n_heads}*{self.d_head})")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for the sinusoid tables")
        if self.segment_len < 1:
            raise ConfigError("segment_len must be >= 1")
        if self.mem_len_train < 0 or self.mem_len_eval < 0:
            raise ConfigError("memory lengths must be >= 0")
        if self.encoding not in ENCODINGS:
            raise ConfigError(f"encoding must be one of {ENCODINGS}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of trainable scalars."""
    V, d, f, N = cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.n_layers
    if cfg.encoding == "relative":
        attn = 5 * d * d + 2 * d + 2 * d  # W_q W_kE W_kR W_v W_o, u and v, LayerNorm
    else:
        attn = 4 * d * d + 2 * d
    ff = d * f + f + f * d + d + 2 * d
    head = V + (0 if cfg.tie_embeddings else d * V)
    return V * d + N * (attn + ff) + head


# ----------------------------------------------------------------- state


@dataclass
class MemoryState:
    """Per-layer cached hidden states, each ``[B, m, d]``; constants only."""

    layers: list = field(default_factory=list)

    @classmethod
    def empty(cls, n_layers: int) -> "MemoryState":
        return cls([None] * n_layers)

    @property
    def length(self) -> int:
        first = self.layers[0] if self.layers else None
        return 0 if first is None else first.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {f"memory.{n}": m.data for n, m in enumerate(self.layers) if m is not None}


@dataclass
class LMOutput:
    logits: Tensor  # [B, L', V]
    memory: MemoryState
    hiddens: list  # h^0 .. h^{N-1}, the inputs of each layer
    nll: Optional[np.ndarray] = None


def update_memory(old: MemoryState, new_hidden: list, m_target: int) -> MemoryState:
    """Keep the last ``m_target`` positions of ``[old ∘ new]`` per layer, stop-gradient."""
    if m_target < 0:
        raise ConfigError("memory length must be >= 0")
    layers = []
    for n, h in enumerate(new_hidden):
        h = h.data if isinstance(h, Tensor) else np.asarray(h)
        prev = old.layers[n] if n < len(old.layers) else None
        cat = h if prev is None else np.concatenate([prev.data, h], axis=1)
        kept = cat[:, cat.shape[1] - min(m_target, cat.shape[1]) :]
        layers.append(nx.stop_gradient(Tensor(np.ascontiguousarray(kept))))
    return MemoryState(layers)


# ----------------------------------------------------------------- model


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


class RecurrentTransformer:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self._build_views()

    def _build_views(self) -> None:
        c, p = self.config, self.params
        self.layers = []
        for n in range(c.n_layers):
            a = f"layers.{n}.attn."
            if c.encoding == "relative":
                attn = RelAttnParams(
                    *(p[a + k] for k in ("w_q", "w_ke", "w_kr", "w_v", "w_o", "u", "v", "ln_gain", "ln_bias"))
                )
            else:
                attn = AbsAttnParams(*(p[a + k] for k in ("w_q", "w_k", "w_v", "w_o", "ln_gain", "ln_bias")))
            ff = {k: p[f"layers.{n}.ff.{k}"] for k in ("w1", "b1", "w2", "b2", "ln_gain", "ln_bias")}
            self.layers.append((attn, ff))

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def empty_memory(self) -> MemoryState:
        return MemoryState.empty(self.config.n_layers)

    def forward_segment(self, tokens, mem=None, train_mode=False, rng=None, targets=None, mem_len=None) -> LMOutput:
        return forward_segment(self, tokens, mem, train_mode, rng, targets, mem_len)


def init_model(config: ModelConfig, seed: int | None = None) -> RecurrentTransformer:
    """Deterministic initialization: N(0, 0.02^2) truncated at 2 sigma, u = v = 0."""
    config.validate()
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    V, d, f, H, dh = config.vocab_size, config.d_model, config.d_ff, config.n_heads, config.d_head

    params: dict[str, Tensor] = {}

    def add(name, arr):
        params[name] = Tensor(np.asarray(arr, dtype=dt), requires_grad=True, name=name)

    add("embedding", _trunc_normal(rng, (V, d)))
    for n in range(config.n_layers):
        a = f"layers.{n}.attn."
        names = ("w_q", "w_ke", "w_kr", "w_v", "w_o") if config.encoding == "relative" else ("w_q", "w_k", "w_v", "w_o")
        for k in names:
            add(a + k, _trunc_normal(rng, (d, d)))
        if config.encoding == "relative":
            add(a + "u", np.zeros((H, dh)))
            add(a + "v", np.zeros((H, dh)))
        add(a + "ln_gain", np.ones(d))
        add(a + "ln_bias", np.zeros(d))
        fp = f"layers.{n}.ff."
        add(fp + "w1", _trunc_normal(rng, (d, f)))
        add(fp + "b1", np.zeros(f))
        add(fp + "w2", _trunc_normal(rng, (f, d)))
        add(fp + "b2", np.zeros(d))
        add(fp + "ln_gain", np.ones(d))
        add(fp + "ln_bias", np.zeros(d))
    if not config.tie_embeddings:
        add("out.weight", _trunc_normal(rng, (d, V)))
    add("out.bias", np.zeros(V))
    return RecurrentTransformer(config, params)


def _feed_forward(h: Tensor, ff: dict, dropout: float, rng, eps: float = 1e-5) -> Tensor:
    B, L, d = h.shape
    inner = nx.add(nx.matmul(h, ff["w1"]), nx.broadcast_to(ff["b1"], (B, L, ff["b1"].shape[0])))
    inner = nx.dropout(nx.relu(inner), dropout, rng)
    out = nx.add(nx.matmul(inner, ff["w2"]), nx.broadcast_to(ff["b2"], (B, L, d)))
    return nx.layer_norm(nx.add(out, h), ff["ln_gain"], ff["ln_bias"], eps)


def embed(model: RecurrentTransformer, tokens: np.ndarray) -> Tensor:
    """``h^0``: scaled embeddings, plus absolute table rows for the baseline."""
    cfg = model.config
    h = nx.scale(nx.embedding(model.params["embedding"], tokens), math.sqrt(cfg.d_model))
    if cfg.encoding == "absolute":
        L = tokens.shape[-1]
        U = sinusoid_table(L, cfg.d_model)[:L].astype(model.dtype)
        h = nx.add(h, Tensor(np.broadcast_to(U, h.shape).copy()))
    return h


def _as_token_batch(tokens, V: int) -> tuple[np.ndarray, bool]:
    toks = np.asarray(tokens)
    if toks.dtype.kind not in "iu":
        raise VocabError("tokens must be integer ids")
    single = toks.ndim == 1
    if single:
        toks = toks[None, :]
    if toks.ndim != 2 or toks.shape[1] < 1:
        raise ConfigError(f"tokens must be [L] or [B, L] with L >= 1, got {toks.shape}")
    if toks.min() < 0 or toks.max() >= V:
        raise VocabError(f"token id outside [0, {V})")
    return toks.astype(np.int64), single


def forward_segment(
    model: RecurrentTransformer,
    tokens,
    mem: MemoryState | None = None,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    targets=None,
    mem_len: int | None = None,
) -> LMOutput:
    """Run one segment; returns logits ``[B, L', V]`` and the updated memory.

    1-d ``tokens`` are treated as a batch of one (logits keep the batch axis).
    Dropout is active only when ``train_mode`` and an ``rng`` is given.
    ``mem_len`` overrides the configured train/eval memory length.
    """
    cfg = model.config
    toks, _ = _as_token_batch(tokens, cfg.vocab_size)
    B, L = toks.shape
    if mem is None or not cfg.recurrence:
        mem = model.empty_memory()
    M = mem.length
    drop = cfg.dropout if train_mode else 0.0

    r_table = sinusoid_table(M + L, cfg.d_model).astype(model.dtype, copy=False) if cfg.encoding == "relative" else None
    mask = causal_mask(L, M)
    h = embed(model, toks)
    hiddens = []
    for n, (attn, ff) in enumerate(model.layers):
        hiddens.append(h)
        m = mem.layers[n]
        if m is not None and m.shape[0] != B:
            raise ConfigError(f"memory batch {m.shape[0]} != token batch {B}")
        h = attention_sublayer(h, m, attn, cfg.n_heads, r_table=r_table, mask=mask, dropout=drop, rng=rng)
        h = _feed_forward(h, ff, drop, rng)

    out_w = model.params.get("out.weight")
    if out_w is None:
        out_w = nx.transpose(model.params["embedding"], (1, 0))
    bias = model.params["out.bias"]
    logits = nx.add(nx.matmul(h, out_w), nx.broadcast_to(bias, (B, L, cfg.vocab_size)))

    if cfg.recurrence:
        m_target = mem_len if mem_len is not None else (cfg.mem_len_train if train_mode else cfg.mem_len_eval)
        new_mem = update_memory(mem, hiddens, m_target)
    else:
        new_mem = model.empty_memory()

    nll = None
    if targets is not None:
        tgt, _ = _as_token_batch(targets, cfg.vocab_size)
        nll = nx.token_nll(logits.data, tgt)
    return LMOutput(logits, new_mem, hiddens, nll)


def loss_positions(length: int, mode: str) -> np.ndarray:
    """Boolean mask of positions that carry loss.

    ``half`` keeps indices ``>= ceil(L'/2)``; a length-1 segment keeps its
    single position.
    """
    if mode not in LOSS_MODES:
        raise ConfigError(f"loss mode must be one of {LOSS_MODES}")
    active = np.ones(length, bool)
    if mode == "half" and length > 1:
        active[: math.ceil(length / 2)] = False
    return active


def segment_loss(output: LMOutput, targets, mode: str = "full") -> Tensor:
    logits = output.logits
    tgt = np.asarray(targets)
    if tgt.ndim == 1:
        tgt = tgt[None, :]
    active = np.broadcast_to(loss_positions(logits.shape[1], mode), tgt.shape)
    return nx.cross_entropy(logits, tgt, active)


# ------------------------------------------------------------- checkpoint

MAGIC = b"TXLCKPT\x00"
FORMAT_VERSION = 1


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Binary container: magic, u32 version, u64 header length, JSON header, raw data.

    Each tensor entry in the header records name, dtype (numpy little-endian
    code), shape, byte offset into the data block, and byte count.
    """
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = dict(header, format_version=FORMAT_VERSION, tensors=entries)
    hb = json.dumps(head, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hb)))
        fh.write(hb)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ConfigError(f"{path}: not a checkpoint container")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported container version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        blob = fh.read()
    tensors = {}
    for e in header.pop("tensors"):
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return header, tensors


def save_checkpoint(path, model: RecurrentTransformer, meta: dict | None = None, extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = {name: t.data for name, t in model.params.items()}
    for k, v in (extra or {}).items():
        tensors[k] = v
    write_container(path, {"kind": "txl-checkpoint", "config": model.config.to_dict(), "meta": meta or {}}, tensors)


def load_checkpoint(path) -> tuple[RecurrentTransformer, dict, dict[str, np.ndarray]]:
    """Returns ``(model, meta, extra_tensors)``."""
    header, tensors = read_container(path)
    config = ModelConfig.from_dict(header["config"])
    reference = init_model(config, 0)
    params = {}
    for name, t in reference.params.items():
        if name not in tensors:
            raise ConfigError(f"{path}: missing tensor {name}")
        arr = tensors.pop(name)
        if arr.shape != t.shape:
            raise ConfigError(f"{path}: tensor {name} has shape {arr.shape}, expected {t.shape}")
        params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
    return RecurrentTransformer(config, params), header.get("meta", {}), tensors

"""Training loop with carried segment memory."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import IO, Optional

import numpy as np

from . import numerics as nx
from .corpus import SegmentBatch, SegmentBatcher
from .errors import ConfigError
from .model import (
    MemoryState,
    RecurrentTransformer,
    forward_segment,
    load_checkpoint,
    save_checkpoint,
    segment_loss,
)
from .numerics import Tensor

log = logging.getLogger(__name__)


class NonFiniteLoss(nx.NumericError):
    pass


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_lanes: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    warmup_steps: Optional[int] = None
    schedule: str = "cosine"
    log_interval: int = 10
    checkpoint_interval: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps is None:
            self.warmup_steps = int(math.ceil(0.05 * self.steps))
        self.validate()

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0")
        if self.batch_lanes < 1:
            raise ConfigError("batch_lanes must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError("schedule must be 'cosine' or 'constant'")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to zero (or constant)."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "constant":
        return cfg.lr
    span = max(cfg.steps - cfg.warmup_steps, 1)
    progress = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    memory: Optional[MemoryState] = None
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def fresh(cls, model: RecurrentTransformer, seed: int) -> "TrainerState":
        zeros = {k: np.zeros_like(t.data) for k, t in model.params.items()}
        return cls(0, zeros, {k: a.copy() for k, a in zeros.items()}, model.empty_memory(), np.random.default_rng(seed))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


def adam_update(model: RecurrentTransformer, grads: dict, state: TrainerState, lr: float, cfg: TrainConfig) -> None:
    t = state.step + 1
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in model.params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if cfg.weight_decay:
            step = step + cfg.weight_decay * p.data
        p.data = p.data - lr * step


def _reset_memory(state: TrainerState, model: RecurrentTransformer, batch: SegmentBatch) -> MemoryState:
    cont = np.asarray(batch.continuation, bool)
    if state.memory is None or not cont.any():
        return model.empty_memory()
    if not cont.all():
        # lanes share one memory tensor; zero the restarting lanes' cached states
        layers = []
        for m in state.memory.layers:
            if m is None:
                layers.append(None)
                continue
            data = m.data.copy()
            data[~cont] = 0.0
            layers.append(nx.stop_gradient(Tensor(data)))
        return MemoryState(layers)
    return state.memory


def train_step(state: TrainerState, model: RecurrentTransformer, batch: SegmentBatch, cfg: TrainConfig) -> tuple[float, TrainerState]:
    """Forward with carried memory, loss, backward, clip, Adam; memory advances with SG."""
    mem = _reset_memory(state, model, batch)
    model.zero_grad()
    out = forward_segment(model, batch.inputs, mem, train_mode=True, rng=state.rng)
    loss = segment_loss(out, batch.targets, model.config.loss_mode)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLoss(f"non-finite loss {value} at step {state.step}")
    nx.backward(loss)
    grads = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in model.params.items()}
    clip_gradients(grads, cfg.clip_norm)
    adam_update(model, grads, state, learning_rate(state.step, cfg), cfg)
    state.memory = out.memory
    state.step += 1
    return value, state


# ----------------------------------------------------------- checkpointing


def save_training_checkpoint(path, model: RecurrentTransformer, state: TrainerState, batcher: SegmentBatcher, cfg: TrainConfig, meta: dict | None = None) -> None:
    extra = {}
    for k in model.params:
        extra[f"optim.m.{k}"] = state.m[k]
        extra[f"optim.v.{k}"] = state.v[k]
    if state.memory is not None:
        extra.update(state.memory.tensors())
    trainer_meta = {
        "step": state.step,
        "rng": state.rng.bit_generator.state,
        "batcher": batcher.state(),
        "memory_layers": model.config.n_layers,
    }
    save_checkpoint(path, model, dict(meta or {}, train_config=cfg.to_dict(), trainer=trainer_meta), extra)


def load_training_checkpoint(path) -> tuple[RecurrentTransformer, TrainerState, dict]:
    model, meta, extra = load_checkpoint(path)
    tm = meta.get("trainer")
    if tm is None:
        raise ConfigError(f"{path}: no trainer state section")
    state = TrainerState.fresh(model, 0)
    for k in model.params:
        state.m[k] = extra[f"optim.m.{k}"].copy()
        state.v[k] = extra[f"optim.v.{k}"].copy()
    layers = [extra.get(f"memory.{n}") for n in range(tm["memory_layers"])]
    state.memory = MemoryState([None if a is None else nx.stop_gradient(Tensor(a.copy())) for a in layers])
    state.step = int(tm["step"])
    state.rng.bit_generator.state = tm["rng"]
    return model, state, meta


# -------------------------------------------------------------------- loop


def train_loop(
    model: RecurrentTransformer,
    cfg: TrainConfig,
    stream,
    out_dir=None,
    metrics: IO[str] | None = None,
    state: TrainerState | None = None,
    batcher_state: dict | None = None,
    meta: dict | None = None,
    until: int | None = None,
) -> tuple[TrainerState, list[dict]]:
    """Train until ``state.step == cfg.steps`` (or ``until``).

    Writes JSON-lines metrics to ``metrics`` and, when ``out_dir`` is given,
    ``ckpt_{step}.txl`` every ``checkpoint_interval`` steps plus ``final.txl``.
    """
    batcher = SegmentBatcher(stream, cfg.batch_lanes, model.config.segment_len)
    if batcher_state:
        batcher.load_state(batcher_state)
    if state is None:
        state = TrainerState.fresh(model, cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    stop = cfg.steps if until is None else min(until, cfg.steps)
    history: list[dict] = []
    ln2 = math.log(2.0)
    t0, tokens = time.perf_counter(), 0
    while state.step < stop:
        batch = batcher.next_cycling()
        lr = learning_rate(state.step, cfg)
        loss, state = train_step(state, model, batch, cfg)
        tokens += batch.inputs.size
        rec = {"step": state.step, "loss": loss, "bpc": loss / ln2, "lr": lr}
        history.append(rec)
        if metrics is not None and (state.step % max(cfg.log_interval, 1) == 0 or state.step == stop):
            dt = time.perf_counter() - t0
            metrics.write(json.dumps(dict(rec, tokens_per_s=tokens / dt if dt > 0 else 0.0)) + "\n")
            metrics.flush()
            t0, tokens = time.perf_counter(), 0
        if out_dir is not None and cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0:
            save_training_checkpoint(out_dir / f"ckpt_{state.step:06d}.txl", model, state, batcher, cfg, meta)
    if out_dir is not None:
        save_training_checkpoint(out_dir / "final.txl", model, state, batcher, cfg, meta)
    return state, history

"""Relative effective context length over a group of models.

All models in a group are scored on the same positions at the same context
lengths. The baseline at context ``c`` is the per-position minimum loss over
the whole group (the evaluated model included).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .evaluator import LossTable


@dataclass
class ReclConfig:
    r: float = 0.1
    delta: int = 100
    initial_c: int = 100
    threshold: float = 0.01
    max_c: int | None = None

    def __post_init__(self):
        if not 0.0 < self.r <= 1.0:
            raise ConfigError("r must be in (0, 1]")
        if self.delta < 1:
            raise ConfigError("delta must be >= 1")
        if self.threshold <= 0:
            raise ConfigError("threshold must be > 0")
        if self.initial_c < 1:
            raise ConfigError("initial_c must be >= 1")


class ModelGroup:
    """Loss tables of several models over one shared token set."""

    def __init__(self, tables: Sequence[LossTable] | Mapping[str, LossTable]):
        if isinstance(tables, Mapping):
            tables = list(tables.values())
        if not tables:
            raise ConfigError("a model group needs at least one loss table")
        self.tables = {t.model_id: t for t in tables}
        if len(self.tables) != len(tables):
            raise ConfigError("duplicate model ids in group")
        counts = {t.count for t in tables}
        if len(counts) != 1:
            raise ConfigError(f"loss tables cover different position counts: {sorted(counts)}")
        ctx = [tuple(t.contexts) for t in tables]
        if len(set(ctx)) != 1:
            raise ConfigError("loss tables cover different context lengths")
        self.contexts = list(ctx[0])

    def loss(self, model_id: str, c: int) -> np.ndarray:
        if model_id not in self.tables:
            raise ConfigError(f"unknown model {model_id!r}")
        return self.tables[model_id].at(c)

    @property
    def model_ids(self) -> list[str]:
        return list(self.tables)


def baseline(group: ModelGroup, c: int) -> np.ndarray:
    return np.min(np.stack([t.at(c) for t in group.tables.values()]), axis=0)


def top_r_positions(b: np.ndarray, r: float) -> np.ndarray:
    """Indices of the ``ceil(r * n)`` largest baseline losses.

    Ties go to the lower position index. Returned sorted ascending.
    """
    if not 0.0 < r <= 1.0:
        raise ConfigError("r must be in (0, 1]")
    b = np.asarray(b)
    k = min(b.size, math.ceil(r * b.size - 1e-12))
    order = np.lexsort((np.arange(b.size), -b))
    return np.sort(order[:k])


def relative_loss(group: ModelGroup, model_id: str, c: int, c2: int, positions: np.ndarray) -> float:
    """Mean over ``positions`` of ``min(baseline(c), loss_model(c2))``."""
    if c2 < c:
        raise ConfigError("need c' >= c")
    b = baseline(group, c)[positions]
    lm = group.loss(model_id, c2)[positions]
    return float(np.minimum(b, lm).mean())


def relative_gain(group: ModelGroup, model_id: str, c: int, c2: int, r: float) -> float:
    """Relative perplexity reduction of going from context ``c`` to ``c2``."""
    T = top_r_positions(baseline(group, c), r)
    f_short = relative_loss(group, model_id, c, c, T)
    f_long = relative_loss(group, model_id, c, c2, T)
    e = math.exp(f_short)
    return (e - math.exp(f_long)) / e


@dataclass
class ReclResult:
    model: str
    r: float
    delta: int
    recl: int
    saturated: bool
    trace: list = field(default_factory=list)  # (c, c', gain)

    def to_dict(self) -> dict:
        return asdict(self)


def recl_search(group: ModelGroup, model_id: str, config: ReclConfig) -> ReclResult:
    """Grow ``c`` by ``delta`` while the relative gain stays ``>= threshold``.

    Stops at ``max_c`` (default: the largest context in the group) with
    ``saturated=False``.
    """
    max_c = config.max_c if config.max_c is not None else max(group.contexts)
    c = config.initial_c
    trace = []
    while True:
        c2 = c + config.delta
        if c2 > max_c:
            return ReclResult(model_id, config.r, config.delta, c, False, trace)
        g = relative_gain(group, model_id, c, c2, config.r)
        trace.append((c, c2, g))
        if g < config.threshold:
            return ReclResult(model_id, config.r, config.delta, c, True, trace)
        c = c2

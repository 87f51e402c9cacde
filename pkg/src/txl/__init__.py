"""Segment-recurrent transformer language models with relative positional attention."""

from .model import ModelConfig, MemoryState, RecurrentTransformer, forward_segment, init_model, segment_loss, update_memory
from .trainer import TrainConfig

__all__ = [
    "ModelConfig",
    "MemoryState",
    "RecurrentTransformer",
    "TrainConfig",
    "forward_segment",
    "init_model",
    "segment_loss",
    "update_memory",
]
__version__ = "0.1.0"

"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or arguments."""


class VocabError(IndexError):
    """Token id outside the vocabulary."""


class EndOfEpoch(StopIteration):
    """The segment batcher has no more segments in this epoch."""

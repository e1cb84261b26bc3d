"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid model, router, or layer configuration."""


class DataFormatError(ValueError):
    """Malformed dataset file (bad magic, truncated buffer, ...)."""


class CheckpointError(ValueError):
    """Malformed or corrupted checkpoint file."""


class TrainingDiverged(RuntimeError):
    """Loss became NaN; carries the epoch and the first offending layer."""

    def __init__(self, message: str, epoch: int, layer: str):
        super().__init__(message)
        self.epoch = epoch
        self.layer = layer

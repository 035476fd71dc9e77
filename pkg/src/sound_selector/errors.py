"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    """Shapes, lengths or class vectors that do not fit together."""


class ZeroReferenceError(ValueError):
    """A metric or loss needs a reference with nonzero energy."""


class ConfigurationError(ValueError):
    """A scene, model or training configuration cannot be satisfied."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt, truncated or of the wrong version."""


class NonFiniteLossError(RuntimeError):
    """A training step produced a NaN/Inf loss; no update was applied."""

    def __init__(self, message, example_ids=()):
        super().__init__(message)
        self.example_ids = list(example_ids)

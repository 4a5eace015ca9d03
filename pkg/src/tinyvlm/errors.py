"""Exception types raised across the pipeline."""


class ConfigError(ValueError):
    """Inconsistent or invalid configuration."""


class InputError(ValueError):
    """Malformed user input (empty image, empty caption, mismatched files)."""


class SequenceLengthError(ValueError):
    """An assembled sequence does not fit in the model's context window."""


class FormatError(ValueError):
    """A file does not follow the expected on-disk format."""


class CheckpointError(FormatError):
    """A checkpoint failed validation (checksum, version, missing tensor)."""


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss."""

    def __init__(self, message, step=None, lr=None, batch_ids=None):
        super().__init__(message)
        self.step = step
        self.lr = lr
        self.batch_ids = batch_ids

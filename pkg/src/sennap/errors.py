"""Exception types shared across the package."""


class SennapError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SennapError):
    """Invalid or missing configuration (column names, flags, split sizes)."""


class LogParseError(SennapError):
    """Malformed event-log input; message carries the offending line number."""


class EncodingError(SennapError):
    """Prefix cannot be encoded (unknown activity, length exceeds k)."""


class TrainingError(SennapError):
    """Training aborted (non-finite loss, empty batch, all grid cells failed)."""


class CheckpointError(SennapError):
    """Checkpoint file is unreadable, truncated, or has the wrong version."""


class SpecMismatchError(CheckpointError):
    """Checkpoint encoding spec disagrees with the data it is applied to."""

"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration value: bad sizes, ranges, or option combinations."""


class RecordValidationError(ValueError):
    """A dataset record violates an invariant; the message names the offending file."""


class EvaluationSetupError(RuntimeError):
    """Probe/gallery arrangement cannot support retrieval evaluation."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; the message carries the offending batch."""


class CheckpointError(RuntimeError):
    """Checkpoint file is missing, corrupt, or carries an unknown format tag."""

"""Exception hierarchy shared across the package.

Every error carries a short machine-readable ``tag`` so the CLI can emit
one-line, scriptable diagnostics.
"""


class AppGenError(Exception):
    """Base class for all appgen errors."""

    tag = "error"

    def __init__(self, message, tag=None):
        super().__init__(message)
        if tag is not None:
            self.tag = tag


class ValidationError(AppGenError):
    """An argument, spec field, or input value violates its contract."""

    tag = "invalid-argument"


class DataFormatError(AppGenError):
    """A persisted file could not be parsed; messages cite line numbers."""

    tag = "bad-record-file"


class CheckpointError(AppGenError):
    """A model checkpoint is missing, corrupt, or incompatible."""

    tag = "bad-checkpoint"


class ConfigError(AppGenError):
    """A run configuration contains unknown keys or unparsable values."""

    tag = "config-error"


class TrainingError(AppGenError):
    """Optimization diverged (non-finite loss); message carries diagnostics."""

    tag = "training-diverged"

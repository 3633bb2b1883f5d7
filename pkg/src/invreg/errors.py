"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError is a usage
problem (exit 1), DataError subclasses are data/format problems
(exit 2), TrainingDivergedError is a numerical failure (exit 3).
"""


class ConfigError(ValueError):
    """Invalid configuration value."""


class DataError(Exception):
    """Base class for problems with input data or on-disk artifacts."""


class FormatError(DataError):
    """Malformed binary file. Carries the byte offset of the problem."""

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {message}")


class ValidationError(DataError):
    """Data violates an invariant (non-finite values, bad bounds, ...)."""


class LandmarkParseError(DataError):
    """Malformed landmark CSV. Carries the 1-based line number."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}: line {line}: {message}")


class SamplingBudgetError(DataError):
    """Rejection sampling exhausted its draw budget without enough accepts."""


class CheckpointError(DataError):
    """Checkpoint file is missing, corrupt, or has an unsupported version."""


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite during optimization."""

    def __init__(self, message, components=None):
        self.components = dict(components) if components else {}
        super().__init__(message)

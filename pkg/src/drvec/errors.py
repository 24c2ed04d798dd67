"""Exception taxonomy shared across the package.

Each class maps to one failure category so callers (and the CLI exit-code
table) can react without string matching.
"""


class DrvecError(Exception):
    """Base class for all package errors."""


class DimensionError(DrvecError):
    """Tensor/matrix shapes do not satisfy an operation's contract."""


class ContractError(DrvecError):
    """An API precondition was violated (e.g. non-scalar backward root)."""


class ConfigError(DrvecError):
    """Invalid configuration value or combination."""


class DataError(DrvecError):
    """Input data violates a documented requirement (missing utterance,
    empty class, deficient speaker, ...)."""


class FormatError(DrvecError):
    """A serialized artifact (WAV, FBK1, checkpoint, trial list) is
    malformed; the message names the offending field."""


class TrainingError(DrvecError):
    """Optimization failed (non-finite loss); message carries the step."""


class CheckpointMismatchError(DrvecError):
    """Checkpoint contents do not match the requested configuration."""

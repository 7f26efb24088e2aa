"""Exception hierarchy shared across the package."""


class TmcirError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(TmcirError):
    """Operands have incompatible or unexpected dimensions."""


class DegenerateInputError(TmcirError):
    """An input is numerically degenerate (e.g. a near-zero-norm row)."""


class EmptySequenceError(TmcirError):
    """An operation received an empty sequence where at least one row is required."""


class EncodingError(TmcirError):
    """An encoder input is out of the configured attribute/vocabulary range."""


class InstructionError(TmcirError):
    """An edit instruction references a cell outside the grid."""


class ContractViolation(TmcirError):
    """A caller broke a documented precondition."""


class ConfigError(TmcirError):
    """A configuration value is invalid or an unknown key was supplied."""


class DataError(TmcirError):
    """A dataset file is malformed."""


class CheckpointError(TmcirError):
    """A checkpoint file failed validation (magic, version, checksum, shapes)."""


class TrainingError(TmcirError):
    """Training aborted (e.g. non-finite loss)."""


class EvaluationError(TmcirError):
    """Retrieval evaluation could not be completed for a query."""

"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``crossmodal.cli``).
"""


class CrossModalError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(CrossModalError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(CrossModalError, RuntimeError):
    """A call violated an API precondition (non-scalar loss, unfrozen tower, ...)."""


class EvaluationError(CrossModalError, ArithmeticError):
    """A function under evaluation produced a non-finite value."""


class EmptySequenceError(DimensionError):
    """A sequence with zero valid frames was supplied."""


class ConfigError(CrossModalError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(CrossModalError, ValueError):
    """Malformed, truncated or mismatched data on disk or in memory."""


class ParseError(DataError):
    """A text source could not be parsed; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(DataError):
    """A structure failed a consistency check (cycle, duplicate, orphan)."""


class LabelLookupError(CrossModalError, KeyError):
    """A label id or path is not present in the taxonomy."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class SamplingError(DataError):
    """Sampling cannot satisfy its constraints with the given corpus."""


class TrainingError(CrossModalError, RuntimeError):
    """Training cannot start or proceed with the given inputs."""


class NumericError(CrossModalError, ArithmeticError):
    """NaN or Inf encountered in gradients, losses or parameters."""


class UndefinedMetricError(CrossModalError, ValueError):
    """A metric is undefined for the supplied data (e.g. no positives)."""


class CheckpointError(DataError):
    """A checkpoint file failed version, integrity or config-hash checks."""


class SuiteError(TrainingError):
    """A run inside an experiment suite failed; ``partial`` holds finished runs."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial

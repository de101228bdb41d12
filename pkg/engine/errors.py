"""
Error types shared by every package.

Each error carries a stable ``code`` so the CLI can report
``{"code": ..., "message": ...}`` payloads and pick an exit code.
"""


class MorphGuardError(Exception):
    """Base class for all errors raised by this project."""

    code = "INTERNAL_ERROR"

    def to_dict(self) -> dict:
        return {"code": self.code, "message": str(self)}


class DimensionError(MorphGuardError, ValueError):
    """Tensor shapes do not line up for an operation."""

    code = "DIMENSION_ERROR"


class NumericError(MorphGuardError, ArithmeticError):
    """Non-finite values reached an operation that needs finite input."""

    code = "NUMERIC_ERROR"


class ContractError(MorphGuardError, ValueError):
    """A precondition of a public function was violated."""

    code = "CONTRACT_ERROR"


class ConfigError(MorphGuardError, ValueError):
    """Configuration is malformed or inconsistent."""

    code = "CONFIG_ERROR"


class TrainingError(MorphGuardError, RuntimeError):
    """Training cannot start or diverged."""

    code = "TRAINING_ERROR"


class MetricError(MorphGuardError, ValueError):
    """A metric is undefined for the given scores."""

    code = "METRIC_ERROR"


class FormatError(MorphGuardError, ValueError):
    """A binary or text file does not follow its documented format."""

    code = "FORMAT_ERROR"


class LoadError(MorphGuardError, FileNotFoundError):
    """A referenced checkpoint or input file is missing."""

    code = "LOAD_ERROR"

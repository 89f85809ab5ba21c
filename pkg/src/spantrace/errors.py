"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class NumericFault(FloatingPointError):
    """A NaN or overflow surfaced during evaluation.

    ``op`` names the operation that produced the bad value, when known.
    """

    def __init__(self, message: str, op: str | None = None):
        super().__init__(message if op is None else f"{message} (op={op})")
        self.op = op


class UndefinedThresholds(ContractViolation):
    """Span-scan thresholds need at least two scores."""


class TruncationError(ContractViolation):
    """Input exceeds the encoder's maximum sequence length."""


class DataContractError(ValueError):
    """A corpus record is missing data an operation needs."""

    def __init__(self, message: str, record_id: str | None = None):
        super().__init__(message if record_id is None else f"{record_id}: {message}")
        self.record_id = record_id


class ValidationError(ValueError):
    """A corpus file or record failed schema validation."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ParseEmptyError(ValueError):
    """Refiner output contained no usable phrases."""


class RefinerError(RuntimeError):
    """The refiner client failed after exhausting retries."""

"""Exception types shared across the package."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class MergeExhausted(ContractError):
    """A merge was requested with fewer than two live groups."""


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class InputError(ContractError):
    """Model inputs are out of range (vocabulary or sequence length)."""


class CheckpointError(OSError):
    """A checkpoint directory is missing, unreadable or corrupt."""

"""Exception types shared across the package."""


class MergeError(Exception):
    """Base class for library errors."""


class IncompatibleArchitectureError(MergeError, ValueError):
    """Models, tensors, or data do not share the required structure."""


class NumericError(MergeError, ArithmeticError):
    """A computation produced NaN or infinity."""


class TrainingDivergedError(NumericError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch


class OperatorInapplicableError(MergeError, ValueError):
    """A genetic operator cannot act on the given parents (e.g. crossover with L = 1)."""


class CapacityError(MergeError, ValueError):
    """Exact computation requested beyond its supported size."""


class ParseError(MergeError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line

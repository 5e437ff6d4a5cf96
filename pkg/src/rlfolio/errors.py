"""Exception types shared across the package."""


class ParseError(ValueError):
    """A data file could not be parsed; the message names the offending line."""


class ValidationError(ValueError):
    """Input data violated a structural invariant."""


class DataError(ValueError):
    """Dataset-level problem (empty calendar, excessive gaps)."""


class GraphError(RuntimeError):
    """A tensor operation was applied to incompatible operands."""


class ContractError(RuntimeError):
    """An API contract was violated by a caller or callback."""


class ConvergenceError(RuntimeError):
    """An iterative solver exhausted its iteration budget."""


class InfeasibleError(ValueError):
    """The constraint set admits no solution."""


class RuinError(RuntimeError):
    """Portfolio value would drop to zero or below (costs exceeded gross return)."""


class TrainingAborted(RuntimeError):
    """Training stopped on non-finite parameters; carries the last good state."""

    def __init__(self, message, spec=None, history=None):
        super().__init__(message)
        self.spec = spec
        self.history = history

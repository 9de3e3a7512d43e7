"""Exception types shared across solver and pipeline modules."""


class SolverError(RuntimeError):
    """A minimization did not reach the requested residual tolerance."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class InvariantViolation(RuntimeError):
    """A structural guarantee (ordering, monotonicity, bound) failed."""


class BlowUpDetected(RuntimeError):
    """An iteration left the admissible regime; carries the iteration index."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index

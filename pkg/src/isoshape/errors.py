"""Exception types shared across the toolkit."""


class IsoshapeError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(IsoshapeError):
    """Array or matrix has the wrong shape for the requested operation."""


class ParameterError(IsoshapeError):
    """A numeric parameter is outside its valid range."""


class DegenerateInputError(IsoshapeError):
    """Input is too degenerate to process (rank-deficient matrix,
    all-coincident points, zero-area mesh, ...)."""


class ContractError(IsoshapeError):
    """A documented precondition or invariant was violated."""


class SampleSizeError(IsoshapeError):
    """Too few samples for the requested statistic."""


class RejectionBudgetError(IsoshapeError):
    """A rejection sampler exhausted its retry budget."""


class MeshParseError(IsoshapeError):
    """Malformed mesh file; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DivergenceError(IsoshapeError):
    """Training produced a non-finite loss."""

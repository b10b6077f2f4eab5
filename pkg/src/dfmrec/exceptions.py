"""Exception types shared across the package.

The CLI maps these onto exit codes, so library code should raise the most
specific class that applies.
"""


class DataError(ValueError):
    """Invalid input data: malformed files, violated invariants, bad shapes."""


class ParseError(DataError):
    """Malformed text input; carries the 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericError(RuntimeError):
    """Numerical failure: divergence, non-finite objective, no convergence."""

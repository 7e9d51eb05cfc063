"""Exception types shared across the pipeline.

The CLI maps :class:`ValidationError` to exit code 2 and
:class:`NumericalError` to exit code 3.
"""


class ValidationError(ValueError):
    """Input data or configuration violates the documented contract."""

    def __init__(self, message, problems=None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + "\n" + "\n".join("  - " + p for p in self.problems)
        super().__init__(message)


class NumericalError(ArithmeticError):
    """A numerical procedure could not produce a usable result."""


class RankDeficiencyError(NumericalError):
    """Design matrix is not of full column rank."""

    def __init__(self, message, columns=()):
        self.columns = list(columns)
        super().__init__(message)

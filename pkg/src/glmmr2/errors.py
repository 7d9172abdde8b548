"""Exception hierarchy shared by every module in the package."""


class GlmmError(Exception):
    """Base class for all package errors."""


class DataError(GlmmError):
    """Problem with the input data (exit code 65 in the CLI)."""


class SchemaError(DataError):
    def __init__(self, column):
        super().__init__(f"missing column: {column!r}")
        self.column = column


class ParseError(DataError):
    def __init__(self, row, column, value, reason="not a finite number"):
        super().__init__(f"row {row}, column {column!r}: {value!r} is {reason}")
        self.row = row
        self.column = column
        self.value = value


class EmptyInputError(DataError):
    pass


class DomainError(GlmmError, ValueError):
    """Argument outside the mathematical domain of a function."""


class OutcomeError(DataError, DomainError):
    """Outcome value not valid for the requested family."""


class DimensionError(GlmmError, ValueError):
    pass


class NotPositiveDefiniteError(GlmmError, ValueError):
    pass


class UnsupportedDimensionError(GlmmError, ValueError):
    pass


class ModeFailureError(GlmmError):
    """Newton search for the conditional mode of a subject did not converge."""

    def __init__(self, subject_index, last_iterate, message=None):
        self.subject_index = subject_index
        self.last_iterate = last_iterate
        super().__init__(
            message
            or f"conditional mode search failed for subject {subject_index} "
            f"(last iterate {list(last_iterate)})"
        )


class SingularDesignError(GlmmError):
    pass


class IncomparableModelsError(GlmmError):
    pass


class OptimizationInconsistencyError(GlmmError):
    pass


class SingularCovarianceError(GlmmError):
    pass


class PreconditionError(GlmmError):
    pass

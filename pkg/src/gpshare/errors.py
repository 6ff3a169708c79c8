"""Exception types raised across the package."""


class NotPsd(ValueError):
    """Cholesky factorization failed even at the maximum jitter."""


class NonFinite(FloatingPointError):
    """An objective or function evaluation produced inf or nan."""


class NoActiveComponent(ValueError):
    """A series (or a whole model) has no active column to report on."""


class AllPruned(ValueError):
    """Every column of a fitted model fell below the activity threshold."""


class ParseError(ValueError):
    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class DuplicateTime(ParseError):
    pass


class ConstantSeries(ValueError):
    pass

"""Exception hierarchy.

The CLI maps these onto exit codes: :class:`DataError` -> 2,
:class:`NumericalError` -> 3. Plain ``ValueError`` raised by argument
validation is treated as a usage error.
"""


class PoolPrevError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(PoolPrevError, ValueError):
    """An argument lies outside the mathematical domain of a function."""


class DataError(PoolPrevError, ValueError):
    """The supplied data cannot be used (empty, malformed, missing columns)."""


class ParseError(DataError):
    """A CSV cell failed validation."""

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{', '.join(loc)}: {message}"
        super().__init__(message)


class FormulaSyntaxError(DataError):
    """Malformed model formula; ``offset`` is the 0-based character position."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at character {offset})")


class UnknownConstructError(DataError):
    """A syntactically recognisable but unsupported formula construct."""

    def __init__(self, construct, offset=None):
        self.construct = construct
        self.offset = offset
        where = "" if offset is None else f" (at character {offset})"
        super().__init__(f"unsupported formula construct {construct!r}{where}")


class RankDeficiencyError(DataError):
    """The fixed-effect design matrix does not have full column rank."""

    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(
            "rank-deficient design; collinear column(s): " + ", ".join(self.columns)
        )


class NumericalError(PoolPrevError, RuntimeError):
    """An optimiser, root finder or integrator failed to converge."""

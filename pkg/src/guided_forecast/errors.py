"""Exception types raised across the package.

NSF is never an exception: it is a :class:`~guided_forecast.seldonian.RunOutcome`
value. Everything here signals a genuine error.
"""


class GuidedForecastError(Exception):
    """Base class for all package errors."""


class ParseError(GuidedForecastError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class GapError(GuidedForecastError):
    def __init__(self, region: str, year: int, week: int):
        self.region = region
        self.year = year
        self.week = week
        super().__init__(f"missing week {week} of {year} for region {region!r}")


class ValidationError(GuidedForecastError, ValueError):
    pass


class SizingError(GuidedForecastError, ValueError):
    pass


class DivergenceError(GuidedForecastError, ArithmeticError):
    def __init__(self, message: str, epoch: int | None = None):
        self.epoch = epoch
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)


class AlignmentError(GuidedForecastError, ValueError):
    pass

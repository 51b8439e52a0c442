"""Exception types shared across the package."""


class HacsError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(HacsError, ValueError):
    """An argument is outside the domain of a model function."""


class BracketError(HacsError):
    """The root-finding bracket does not contain a sign change."""

    def __init__(self, lo, hi, f_lo, f_hi):
        super().__init__(
            f"no sign change on [{lo!r}, {hi!r}]: f(lo)={f_lo!r}, f(hi)={f_hi!r}"
        )
        self.lo, self.hi = lo, hi
        self.f_lo, self.f_hi = f_lo, f_hi


class ConvergenceError(HacsError):
    """The root finder exhausted its iteration budget."""


class EstimationError(HacsError):
    """The likelihood equation could not be bracketed.

    ``residuals`` holds the residual values at the final bracket ends.
    """

    def __init__(self, message, bracket, residuals):
        super().__init__(f"{message}: bracket={bracket!r}, residuals={residuals!r}")
        self.bracket = bracket
        self.residuals = residuals


class InsufficientHistory(HacsError):
    """Fewer than two usable accesses; the rate cannot be estimated."""


class ConfigError(HacsError):
    """Invalid run or generator configuration."""

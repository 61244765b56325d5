"""Exception hierarchy shared by every module."""


class StationaryNPError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(StationaryNPError, ValueError):
    """Operand shapes disagree.

    ``dim`` names the offending dimension (e.g. ``"C_in"`` or ``"axis 1"``).
    """

    def __init__(self, message, dim=None, expected=None, got=None):
        super().__init__(message)
        self.dim = dim
        self.expected = expected
        self.got = got


class DomainError(StationaryNPError, ValueError):
    """An argument lies outside the domain of a function (log of <= 0, division by 0)."""


class NumericalError(StationaryNPError, ArithmeticError):
    """A factorization or solve failed even after jitter escalation."""


class ConfigError(StationaryNPError, ValueError):
    """Invalid or inconsistent configuration."""

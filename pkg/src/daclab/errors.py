"""Exception types raised across the package."""


class DaclabError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(DaclabError, ValueError):
    pass


class NumericalError(DaclabError, ArithmeticError):
    pass


class UnstableModeError(DaclabError, ValueError):
    """A mode recursion has |1 - gamma*lambda| >= 1, so no stationary law exists."""


class InsufficientDataError(DaclabError, ValueError):
    pass


class DivergedError(NumericalError):
    """Raised when an iterate matrix picks up non-finite entries."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ConfigError(DaclabError, ValueError):
    """Configuration text failed to parse or validate."""

    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.key = key
        self.line = line

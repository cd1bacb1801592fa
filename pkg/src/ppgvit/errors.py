"""Exception hierarchy shared by all ppgvit modules."""


class PpgVitError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(PpgVitError, ValueError):
    pass


class ConfigError(PpgVitError, ValueError):
    pass


class DataError(PpgVitError, ValueError):
    """Malformed or incomplete dataset content (bad line, missing label)."""


class NumericError(PpgVitError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class EmptyPoolError(NumericError):
    """Attention pooling was asked to pool over zero valid positions."""


class LayoutError(PpgVitError, ValueError):
    pass

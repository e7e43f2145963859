class ChemuError(Exception):
    """Base class for all errors raised by chemu."""


class ConfigError(ChemuError, ValueError):
    """Invalid scenario or engine parameter. ``key`` names the offending field."""

    def __init__(self, message, key=None, line=None):
        super().__init__(message)
        self.key = key
        self.line = line


class GeometryError(ChemuError, ValueError):
    """Degenerate geometry, e.g. an antenna coinciding with a scatterer."""


class NearDependentBasis(ChemuError, ArithmeticError):
    """Gram-Schmidt pivot fell below the dependence threshold."""

    def __init__(self, message, column=None, ratio=None):
        super().__init__(message)
        self.column = column
        self.ratio = ratio


class FormatError(ChemuError, ValueError):
    """Malformed binary file."""


class BadMagic(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass

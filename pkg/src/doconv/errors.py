"""Exception types raised across the package."""


class DoConvError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(DoConvError, ValueError):
    pass


class GeometryError(DoConvError, ValueError):
    pass


class UnsupportedConfigError(DoConvError, ValueError):
    pass


class NumericError(DoConvError, ArithmeticError):
    """A non-finite value showed up where finite values are required."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class FormatError(DoConvError, OSError):
    """Base class for on-disk format problems (IDX or model files)."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass

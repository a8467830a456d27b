"""Exception types shared across the library."""


class UapForgeError(Exception):
    """Base class for all library errors."""


class ShapeError(UapForgeError):
    """Array dimensions do not match what a spec or file header requires."""


class FormatError(UapForgeError):
    """A serialized file is malformed or has an unknown tag."""


class NumericalError(UapForgeError):
    """A computation produced non-finite values."""


class DegenerateGradientError(UapForgeError):
    """DeepFool hit a decision margin with (near-)zero gradient norm."""

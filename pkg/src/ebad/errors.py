"""Shared exception types. Every failure raised by this package derives from EbadError."""


class EbadError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(EbadError, ValueError):
    """Array shapes are incompatible with what an operation requires."""


class NonFiniteError(EbadError, ArithmeticError):
    """A NaN or infinity appeared where only finite values are allowed."""

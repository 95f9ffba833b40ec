"""Exception hierarchy shared by every focalcvae module."""

from typing import Optional, Sequence


class FocalCVAEError(Exception):
    """Base class for all errors raised by focalcvae."""


class DimensionError(FocalCVAEError):
    """Raised when tensor shapes are incompatible."""

    def __init__(self, message: str, *shapes: Sequence[int]):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class ConfigurationError(FocalCVAEError):
    """Raised for invalid, unknown or inconsistent configuration values."""


class UsageError(FocalCVAEError):
    """Raised when an API is called outside its contract."""


class NumericalError(FocalCVAEError):
    """Raised when a loss or an op output becomes non-finite."""

    def __init__(self, message: str, step: Optional[int] = None, term: Optional[str] = None):
        detail = message
        if step is not None:
            detail += f" (step {step}"
            detail += f", term {term})" if term else ")"
        elif term:
            detail += f" (term {term})"
        super().__init__(detail)
        self.step = step
        self.term = term


class DatasetFormatError(FocalCVAEError):
    """Raised when a dataset or checkpoint file cannot be parsed."""

    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path

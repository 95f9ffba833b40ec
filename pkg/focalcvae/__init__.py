"""Focal-CVAE: RGB-D imitation learning with focal and saliency attention on a NumPy autodiff core.

The package root stays free of NumPy so ``python -m focalcvae bench`` can pin
BLAS threads before any array library loads.
"""

from focalcvae.errors import (
    ConfigurationError,
    DatasetFormatError,
    DimensionError,
    FocalCVAEError,
    NumericalError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DatasetFormatError",
    "DimensionError",
    "FocalCVAEError",
    "NumericalError",
    "UsageError",
]

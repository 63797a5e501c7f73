"""Modulated mixture-of-experts for text-conditioned time series."""

from .kernels import BACKEND
from .errors import MomeError

__version__ = "0.1.0"

__all__ = ["BACKEND", "MomeError", "__version__"]

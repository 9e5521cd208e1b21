"""Optimized probability-gradient clipping for learning with noisy labels."""
from ogclab.kernels import BACKEND
from ogclab.losscore import BaseLoss, HuberizedLoss

__version__ = "0.1.0"

__all__ = ["BACKEND", "BaseLoss", "HuberizedLoss", "__version__"]

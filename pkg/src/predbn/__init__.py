"""Prediction-time batch normalization under covariate shift, at desk scale."""
from ._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]

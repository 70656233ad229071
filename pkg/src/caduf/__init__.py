"""Cascade super-resolution for images degraded by blur, bicubic downsampling and noise."""

from . import _backend
from .tensor import GraphError, Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "GraphError", "backend_name", "__version__"]


def backend_name() -> str:
    """Name of the kernel backend selected at import ("cython" or "python")."""
    return _backend.name()

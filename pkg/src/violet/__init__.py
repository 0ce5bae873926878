"""Meshed cross-attention captioning with a split frozen/fusion decoder."""

from ._kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]

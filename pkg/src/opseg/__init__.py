"""Self-ONN encoder-decoder segmentation for lumbar spine MRI, built on a
small reverse-mode autodiff engine."""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]

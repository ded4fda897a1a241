"""Hot kernels behind the autograd convolution and pooling ops.

The compiled Cython module is preferred.  When it is not built (or
``OPSEG_KERNELS=python`` is set) the numpy implementations are used.
Both expose the same functions and are checked against each other
in the test suite.
"""
import os

from . import _pykernels

_requested = os.environ.get("OPSEG_KERNELS", "auto").lower()

if _requested == "python":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
pad_flat = _impl.pad_flat
conv_flat_forward = _impl.conv_flat_forward
conv_flat_backward = _impl.conv_flat_backward

__all__ = [
    "BACKEND",
    "im2col",
    "col2im",
    "maxpool_forward",
    "maxpool_backward",
    "pad_flat",
    "conv_flat_forward",
    "conv_flat_backward",
]

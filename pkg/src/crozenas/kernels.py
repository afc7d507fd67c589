"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``CROZE_KERNELS=python`` to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

if os.environ.get("CROZE_KERNELS", "").lower() == "python":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "cython" if _impl is not _kernels_py else "python"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, w, b, dilation=1, impl=None):
    return (impl or _impl).conv2d_forward(_c(x), _c(w), _c(b), int(dilation))


def conv2d_backward(gy, x, w, dilation=1, impl=None):
    return (impl or _impl).conv2d_backward(_c(gy), _c(x), _c(w), int(dilation))


def avgpool3_forward(x, impl=None):
    return (impl or _impl).avgpool3_forward(_c(x))


def avgpool3_backward(gy, impl=None):
    return (impl or _impl).avgpool3_backward(_c(gy))


def maxpool3_forward(x, impl=None):
    return (impl or _impl).maxpool3_forward(_c(x))


def maxpool3_backward(gy, argidx, impl=None):
    return (impl or _impl).maxpool3_backward(_c(gy), np.ascontiguousarray(argidx, dtype=np.int64))


def available_backends():
    """Map backend name to module for every importable implementation."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        found["cython"] = _kernels
    return found

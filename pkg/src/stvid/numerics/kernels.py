"""Kernel backend selection.

The compiled extension is preferred; set ``STVID_PURE_PYTHON=1`` to force the
NumPy fallback (the test-suite runs both).
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("STVID_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
conv1d_time_forward = _impl.conv1d_time_forward
conv1d_time_backward = _impl.conv1d_time_backward


def use_backend(name):
    """Switch the active kernels ('cython' or 'python'); returns the previous name."""
    global BACKEND, _impl, conv2d_forward, conv2d_backward
    global conv1d_time_forward, conv1d_time_backward
    prev = BACKEND
    _impl = get_backend(name)
    BACKEND = name
    conv2d_forward = _impl.conv2d_forward
    conv2d_backward = _impl.conv2d_backward
    conv1d_time_forward = _impl.conv1d_time_forward
    conv1d_time_backward = _impl.conv1d_time_backward
    return prev


def available_backends():
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return names
    return ["cython"] + names


def get_backend(name=None):
    """Return a kernel module by name ('cython' or 'python'); default active."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")

"""Picks the compiled kernels when built, the pure-Python ones otherwise.

Set TXACCEL_PURE_PYTHON=1 to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("TXACCEL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

list_schedule = _impl.list_schedule
replay = _impl.replay

STATUS_OK = _kernels_py.STATUS_OK
STATUS_OVERFLOW = _kernels_py.STATUS_OVERFLOW
STATUS_DEADLOCK = _kernels_py.STATUS_DEADLOCK

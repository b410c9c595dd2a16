"""Kernel dispatch: the Cython build when available, else pure Python.

Set ``VIDCOLOR_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

FNV_OFFSET = _kernels_py.FNV_OFFSET

BACKEND = "python"
_impl = _kernels_py
if not os.environ.get("VIDCOLOR_PURE_PYTHON"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def fnv1a64(data, state: int = FNV_OFFSET) -> int:
    """64-bit FNV-1a over ``data`` (bytes-like), optionally continuing ``state``."""
    if isinstance(data, memoryview) and not data.contiguous:
        data = data.tobytes()
    if BACKEND == "cython":
        return _impl.fnv1a64(memoryview(data).cast("B"), state)
    return _impl.fnv1a64(data, state)

"""Payload checksums for the activation store.

The compiled kernel is used when available; set ``TABPROBE_PURE_PYTHON=1`` to
force the fallback.
"""

from __future__ import annotations

import os

from . import _fnv_py

try:
    if os.environ.get("TABPROBE_PURE_PYTHON"):
        raise ImportError("pure-Python mode requested")
    from ._ext.fnv import fnv1a_64 as _fnv_compiled
except ImportError:
    _fnv_compiled = None

BACKEND = "cython" if _fnv_compiled is not None else "python"


def fnv1a_64(data, backend: str | None = None) -> int:
    """64-bit FNV-1a of a bytes-like object."""
    backend = backend or BACKEND
    if backend == "cython":
        if _fnv_compiled is None:
            raise ImportError("compiled checksum kernel is not built")
        return _fnv_compiled(memoryview(data).cast("B"))
    return _fnv_py.fnv1a_64(data)


def fnv1a_hex(data, backend: str | None = None) -> str:
    return f"{fnv1a_64(data, backend):016x}"

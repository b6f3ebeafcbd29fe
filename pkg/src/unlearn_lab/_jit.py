"""Numba switch.

Set ``UNLEARN_LAB_JIT=0`` to force the pure-numpy kernels (useful when
debugging or when numba is not installed).
"""
from __future__ import annotations

import os

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is an optional speedup
    _numba = None


def _flag() -> bool:
    raw = os.environ.get("UNLEARN_LAB_JIT", "1").strip().lower()
    return raw not in ("0", "false", "no", "off")


NUMBA_AVAILABLE = _numba is not None
USE_NUMBA = NUMBA_AVAILABLE and _flag()


def njit(fn):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise."""
    if _numba is None:
        return fn
    return _numba.njit(cache=True, fastmath=False)(fn)

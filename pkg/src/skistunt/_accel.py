"""Numba switch.

Set ``SKISTUNT_DISABLE_NUMBA=1`` before import to force the pure-numpy kernels.
"""
import os
import warnings

_FLAG = os.environ.get("SKISTUNT_DISABLE_NUMBA", "").strip().lower()
DISABLED = _FLAG in ("1", "true", "yes", "on")

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None
    if not DISABLED:
        warnings.warn("numba not found, falling back to numpy kernels")

USE_NUMBA = numba is not None and not DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(func):
    """Compile ``func`` in nopython mode, or return it untouched without numba."""
    if numba is None:
        return func
    return numba.njit(cache=True, fastmath=False)(func)

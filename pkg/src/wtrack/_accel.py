"""Numba switch.

Set ``WTRK_NUMBA=0`` before import to run every kernel through its
pure-numpy path.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("WTRK_NUMBA", "1") not in ("0", "false", "off")
CACHE_NUMBA = os.environ.get("WTRK_NUMBA_CACHE", "1") not in ("0", "false", "off")


def njit(func):
    """Compile ``func`` in nopython mode when numba is importable, else return it."""
    if numba is None:  # pragma: no cover
        return func
    return numba.njit(cache=CACHE_NUMBA)(func)

"""Kernel backend selection.

Hot loops are written twice: an explicit-loop version compiled with numba and
a vectorized numpy version. ``HRLROOMS_NUMPY=1`` in the environment (read once
at import) forces the numpy path everywhere; it is also used automatically when
numba cannot be imported.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba ships with the default install
    numba = None

USE_NUMBA = numba is not None and os.environ.get("HRLROOMS_NUMPY", "0") not in ("1", "true", "yes")
CACHE_NUMBA = os.environ.get("HRLROOMS_NUMBA_CACHE", "1") not in ("0", "false", "no")


def njit(func=None, *, fastmath: bool = False):
    """Compile ``func`` in nopython mode, or return it untouched without numba."""
    if func is None:
        return lambda f: njit(f, fastmath=fastmath)
    if numba is None:
        return func
    return numba.njit(cache=CACHE_NUMBA, fastmath=fastmath)(func)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


def pick(nb_impl, np_impl):
    """Return the kernel for the active backend."""
    return nb_impl if USE_NUMBA else np_impl

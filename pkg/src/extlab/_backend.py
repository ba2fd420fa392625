"""Kernel backend selection.

Hot loops live in :mod:`extlab.kernels` and come in two flavours: numba
``@njit`` kernels and pure-numpy fallbacks.  The numba path is the default;
setting the environment variable ``LAB_DISABLE_NUMBA=1`` (before import)
selects the fallbacks.  ``benchmarks/bench_kernels.py`` compares the two.
"""

import os

USE_NUMBA = os.environ.get("LAB_DISABLE_NUMBA", "0") not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        import numba
        from numba import njit, prange
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False

if not USE_NUMBA:
    numba = None
    prange = range

    def njit(*args, **kwargs):
        """No-op decorator standing in for numba.njit."""
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


def backend_name():
    return "numba" if USE_NUMBA else "numpy"


def set_threads(k):
    """Pin the worker count for numba parallel regions (no-op on fallback)."""
    if USE_NUMBA and k:
        numba.set_num_threads(max(1, int(k)))

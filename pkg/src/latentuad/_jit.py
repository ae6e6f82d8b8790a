"""Numba switch for the hot kernels.

Set ``LATENTUAD_DISABLE_JIT=1`` to select the vectorized numpy versions of
the hot loops instead (convolutions, SMO, the online-EM recursion). With
the flag set, ``kernel`` leaves functions uncompiled, so a loop kernel
called directly still runs, just slowly.
"""
import os

USE_NUMBA = os.environ.get("LATENTUAD_DISABLE_JIT", "0").lower() not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        from numba import njit as _njit
    except ImportError:  # pragma: no cover
        USE_NUMBA = False


def kernel(func):
    """Compile ``func`` with ``numba.njit(cache=True)`` unless disabled."""
    if USE_NUMBA:
        return _njit(cache=True, fastmath=False)(func)
    return func


def set_threads():
    """Honor ``UAD_THREADS`` for numba's thread pool; return the cap."""
    n = int(os.environ.get("UAD_THREADS", "0") or 0)
    if n <= 0:
        n = os.cpu_count() or 1
    if USE_NUMBA:
        import numba

        # the default layer probes TBB first and warns about old installs
        if "NUMBA_THREADING_LAYER" not in os.environ:
            numba.config.THREADING_LAYER = "workqueue"
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n

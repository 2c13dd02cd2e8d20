"""Numba switch for the hot kernels.

Set ``FORGE_NUMBA=0`` before import to run every kernel through its pure-numpy
path (useful for debugging and for machines without a working LLVM).
"""

import logging
import os

logger = logging.getLogger(__name__)

_flag = os.environ.get("FORGE_NUMBA", "1").strip().lower()
_requested = _flag not in ("0", "false", "no", "off")

try:
    if not _requested:
        raise ImportError("disabled by FORGE_NUMBA")
    import numba

    # the bundled TBB is too old for numba; pick a layer that works everywhere
    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "omp"
    njit = numba.njit
    prange = numba.prange
    HAVE_NUMBA = True
except ImportError as exc:
    if _requested:
        logger.warning("numba unavailable (%s); using numpy kernels", exc)

    def njit(pyfunc=None, **kwargs):
        def wrap(func):
            return func

        return wrap if pyfunc is None else wrap(pyfunc)

    prange = range
    HAVE_NUMBA = False


def use_numba() -> bool:
    """True when the compiled kernels are active."""
    return HAVE_NUMBA


def n_threads() -> int:
    raw = os.environ.get("FORGE_THREADS")
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


def configure_threads() -> int:
    """Apply ``FORGE_THREADS`` to the numba pool; returns the thread count in use."""
    n = n_threads()
    if HAVE_NUMBA:
        n = min(n, numba.config.NUMBA_NUM_THREADS)
        numba.set_num_threads(n)
    return n

"""Kernel backend selection.

Hot loops are compiled with numba when it is importable. Setting
``LAMPE_BACKEND=numpy`` (or ``LAMPE_DISABLE_NUMBA=1``) forces the pure-numpy
path, which is useful for debugging and for benchmarking the two against
each other.
"""

import os

try:
    import numba
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None
    HAVE_NUMBA = False


def _requested_backend():
    if os.environ.get("LAMPE_DISABLE_NUMBA", "").strip() not in ("", "0"):
        return "numpy"
    name = os.environ.get("LAMPE_BACKEND", "numba").strip().lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"LAMPE_BACKEND must be 'numba' or 'numpy', got {name!r}")
    return name


BACKEND = _requested_backend() if HAVE_NUMBA else "numpy"
USE_NUMBA = BACKEND == "numba"


def njit(*args, **kwargs):
    """``numba.njit`` with caching on; identity decorator when numba is absent."""
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return _njit(*args, **kwargs)


def apply_thread_limit():
    """Honour ``LAMPE_THREADS`` as a cap on numba's worker pool."""
    raw = os.environ.get("LAMPE_THREADS")
    if not raw or not HAVE_NUMBA:
        return None
    n = max(1, int(raw))
    n = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n

"""Backend switch for the compiled kernels.

Set ``MVDEPTH_DISABLE_NUMBA=1`` to force the pure-numpy path (useful for
debugging, coverage, or platforms without numba).
"""
import os

try:
    if os.environ.get("MVDEPTH_DISABLE_NUMBA", "").strip() not in ("", "0"):
        raise ImportError
    import numba

    HAVE_NUMBA = True
    njit = numba.njit(cache=True, nogil=True)
except ImportError:
    HAVE_NUMBA = False

    def njit(func):
        return func


BACKEND = "numba" if HAVE_NUMBA else "numpy"

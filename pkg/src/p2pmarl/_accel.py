"""JIT selection for the hot kernels.

Numba is used when importable unless ``P2PMARL_DISABLE_NUMBA`` is set to a
truthy value, in which case every kernel runs its pure-numpy twin.
"""
import os

_FLAG = os.environ.get("P2PMARL_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and _FLAG not in ("1", "true", "yes", "on")


def njit(func):
    """``numba.njit(cache=True)`` when available, otherwise identity."""
    if numba is None:
        return func
    return numba.njit(cache=True)(func)


__all__ = ["USE_NUMBA", "njit"]

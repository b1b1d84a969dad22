"""Optional numba acceleration.

Set ``TVE_NUMBA=0`` to force the pure-numpy code path. When numba is not
importable the numpy path is used silently.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def numba_available():
    return numba is not None


def numba_enabled():
    """True unless disabled by ``TVE_NUMBA=0`` (or numba is missing)."""
    flag = os.environ.get("TVE_NUMBA", "1").strip().lower()
    return numba_available() and flag not in ("0", "false", "no", "off")


def njit(fn):
    """``numba.njit(cache=True)`` if numba is importable, else ``fn`` itself."""
    if numba is None:
        return fn
    return numba.njit(cache=True)(fn)

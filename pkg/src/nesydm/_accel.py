"""Numba switch.

Hot kernels are compiled with ``numba.njit`` when numba is importable and the
``NESYDM_NUMBA`` environment variable is not set to ``0``.  Every kernel also
has a pure-numpy implementation, selected otherwise.
"""

import os

_FLAG = os.environ.get("NESYDM_NUMBA", "1").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba ships with the dev image
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` or a no-op decorator when numba is missing."""
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)

"""Numba switch.

Hot loops in :mod:`kneebench.kernels` exist twice: a numba ``@njit`` loop and a
vectorised numpy path.  The numba path is used when numba imports and the
environment variable ``KNEEBENCH_DISABLE_NUMBA`` is unset (or ``0``).
"""

import os

_FLAG = os.environ.get("KNEEBENCH_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and not _DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, otherwise a no-op decorator.

    Loops decorated here stay importable (and correct, just slow) without numba,
    which lets the tests compare both paths on any machine.
    """
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend():
    return "numba" if USE_NUMBA else "numpy"

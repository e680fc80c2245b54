"""Kernel backend selection.

Hot loops have two implementations: a numba ``@njit`` kernel and a pure
numpy path. Both must produce bit-identical output. The numba path is used
when numba imports cleanly and ``FP4STREAM_DISABLE_NUMBA`` is unset or "0".
"""

from __future__ import annotations

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False


def _env_disabled() -> bool:
    return os.environ.get("FP4STREAM_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = HAVE_NUMBA and not _env_disabled()


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity decorator otherwise."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrapper(f):
        return f

    return wrapper


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"

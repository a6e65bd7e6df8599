"""Switch between numba-compiled kernels and the pure-numpy fallbacks.

Set ``BILLIARDS_NUMBA=0`` before import to force the numpy paths (numba is also
skipped when it is not installed).
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None

ENV_FLAG = "BILLIARDS_NUMBA"


def numba_requested() -> bool:
    return os.environ.get(ENV_FLAG, "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = numba is not None and numba_requested()


def njit(fn):
    """Compile with numba when enabled, otherwise return the plain function."""
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"

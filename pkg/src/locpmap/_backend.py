"""Kernel backend selection.

Set ``LOCPMAP_BACKEND=numpy`` to force the pure-numpy kernels; the default
is ``numba`` when it can be imported.
"""
import os

_requested = os.environ.get("LOCPMAP_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"LOCPMAP_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

BACKEND = "numba" if (_requested == "numba" and HAVE_NUMBA) else "numpy"


def njit(fn):
    """Compile with numba when available, otherwise return ``fn`` unchanged."""
    if not HAVE_NUMBA:  # pragma: no cover
        return fn
    return numba.njit(cache=True, nogil=True)(fn)

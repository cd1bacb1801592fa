"""Numba switch.

Set ``PPGVIT_DISABLE_NUMBA=1`` to force the pure-numpy kernels. The flag is
read once at import time; :func:`set_backend` flips it afterwards (used by the
benchmark and the cross-path tests).
"""
import os

_FLAG = os.environ.get("PPGVIT_DISABLE_NUMBA", "").strip().lower()

try:
    import numba as _nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    _nb = None

HAVE_NUMBA = _nb is not None
_use_numba = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")

# fastmath stays off: kernels must agree with the numpy path to the last few ulps
njit_kwargs = {"nogil": True, "fastmath": False, "cache": True}


def njit(fn):
    if _nb is None:  # pragma: no cover
        return fn
    return _nb.njit(**njit_kwargs)(fn)


def use_numba() -> bool:
    return _use_numba


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` for subsequent kernel calls."""
    global _use_numba
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        _use_numba = True
    elif name == "numpy":
        _use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r}")


def backend() -> str:
    return "numba" if _use_numba else "numpy"

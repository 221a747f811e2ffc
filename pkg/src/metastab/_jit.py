"""JIT switch for the numeric kernels.

Kernels are written in the numba-compatible subset of Python so the same
source runs either compiled or interpreted.  Set ``METASTAB_DISABLE_JIT=1``
to force the interpreted numpy path (useful for debugging and benchmarks).
"""
import os

_FALSY = {"", "0", "false", "no", "off"}

JIT_DISABLED = os.environ.get("METASTAB_DISABLE_JIT", "0").strip().lower() not in _FALSY

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    JIT_DISABLED = True


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, identity decorator otherwise.

    The compiled dispatcher keeps the interpreted function reachable as
    ``kernel.py_func``; the fallback sets the same attribute so callers can
    always pick either path explicitly.
    """
    if args and callable(args[0]) and len(args) == 1 and not kwargs:
        return njit()(args[0])

    def wrap(func):
        if JIT_DISABLED:
            func.py_func = func
            return func
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)(func)

    return wrap

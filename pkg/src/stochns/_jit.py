"""
Numba shim.

Kernels in :mod:`stochns._kernels` are written once as plain loops and
decorated with :func:`njit`.  Setting ``STOCHNS_DISABLE_NUMBA=1`` (or running
without numba installed) turns the decorator into a passthrough, in which case
callers dispatch to the vectorized numpy implementations instead of running
the loops in the interpreter.
"""
import os
import warnings

_disabled = os.environ.get("STOCHNS_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:
    if not _disabled:
        warnings.warn("numba is not installed - falling back to numpy kernels")
    HAVE_NUMBA = False
    prange = range

    def njit(*args, **kw):
        if len(args) == 1 and callable(args[0]) and not kw:
            return args[0]
        return lambda f: f


def use_numba():
    """True when the compiled kernels are active."""
    return HAVE_NUMBA

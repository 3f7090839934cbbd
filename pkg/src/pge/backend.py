"""Kernel backend selection.

Two interchangeable kernel sets exist: the compiled extension
(``pge._kernels``, Cython) and a pure NumPy fallback
(``pge._kernels_ref``).  The compiled one is picked at import when it
is available; set ``PGE_BACKEND=python`` or ``PGE_BACKEND=compiled``
to force a choice.  ``use()`` switches at runtime, which the tests and
the benchmark rely on.
"""

import os

from . import _kernels_ref

try:
    from . import _kernels
except ImportError:
    _kernels = None

_BACKENDS = {"python": _kernels_ref}
if _kernels is not None:
    _BACKENDS["compiled"] = _kernels

#: Active kernel module.  Import this lazily via ``get()`` — modules that
#: bind it at import time would miss later ``use()`` calls.
kernels = _kernels if _kernels is not None else _kernels_ref


def available():
    """Names of the backends importable in this environment."""
    return sorted(_BACKENDS)


def name():
    """Name of the active backend ('compiled' or 'python')."""
    return kernels.NAME


def get(backend=None):
    """Return a kernel module by name, or the active one."""
    if backend is None:
        return kernels
    try:
        return _BACKENDS[backend]
    except KeyError:
        raise ValueError(
            f"unknown backend {backend!r}; available: {available()}"
        ) from None


def use(backend):
    """Switch the active backend ('compiled' or 'python')."""
    global kernels
    kernels = get(backend)
    return kernels


_requested = os.environ.get("PGE_BACKEND", "").strip().lower()
if _requested and _requested != "auto":
    use(_requested)

"""Kernel backend selection: numba-jitted loops or pure-numpy fallbacks.

The backend is chosen once at import from the ``FUSEFIELD_BACKEND``
environment variable (``numba`` or ``numpy``; default ``numba``, falling
back to ``numpy`` when numba is not importable).  Tests and benchmarks may
switch at runtime with :func:`set_backend`; kernels dispatch at call time.

Kernels come in two flavours:

* loop kernels decorated with :func:`compiled` run the *same* source either
  jitted or as plain Python, so both backends produce bit-identical results;
* vectorised kernels keep a separate numpy implementation and dispatch on
  :func:`backend` (results agree to floating-point reassociation error).
"""

from __future__ import annotations

import os

from .errors import ConfigError

_VALID = ("numba", "numpy")


def _initial_backend() -> str:
    name = os.environ.get("FUSEFIELD_BACKEND", "numba")
    if name not in _VALID:
        raise ConfigError(
            f"FUSEFIELD_BACKEND must be one of {_VALID}, got {name!r}"
        )
    if name == "numba":
        try:
            import numba  # noqa: F401
        except ImportError:
            name = "numpy"
    return name


_backend = _initial_backend()


def backend() -> str:
    """Name of the active kernel backend (``numba`` or ``numpy``)."""
    return _backend


def set_backend(name: str) -> str:
    """Switch backends at runtime; returns the previous backend name."""
    global _backend
    if name not in _VALID:
        raise ConfigError(f"backend must be one of {_VALID}, got {name!r}")
    previous = _backend
    _backend = name
    return previous


class compiled:
    """Wrap a loop kernel so it runs jitted under numba, plain otherwise.

    Compilation is lazy (first numba-backend call) and cached on disk so
    repeated test runs do not pay the JIT cost again.
    """

    def __init__(self, pyfunc):
        self._pyfunc = pyfunc
        self._jitted = None
        self.__name__ = pyfunc.__name__
        self.__doc__ = pyfunc.__doc__

    @property
    def py_func(self):
        return self._pyfunc

    def _compile(self):
        from numba import njit

        self._jitted = njit(cache=True)(self._pyfunc)
        return self._jitted

    def __call__(self, *args):
        if _backend == "numba":
            fn = self._jitted or self._compile()
            return fn(*args)
        return self._pyfunc(*args)

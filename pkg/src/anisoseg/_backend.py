"""Kernel backend selection.

Hot loops (convolution, pooling, distance transforms, component labeling)
exist twice: a numba ``@njit`` version and a pure-numpy fallback.  The
``ANISOSEG_BACKEND`` environment variable picks one of

``auto``
    per kernel family, whichever path ``benchmarks/bench_kernels.py``
    measured faster (convolutions go through BLAS, the sequential scans
    through numba).  This is the default.
``numba``
    every kernel runs its ``@njit`` version.
``numpy``
    every kernel runs its numpy version; numba is never imported by the
    kernels.

The choice can be changed at runtime with :func:`set_backend` or the
:func:`use_backend` context manager.
"""

from __future__ import annotations

import contextlib
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

ENV_VAR = "ANISOSEG_BACKEND"
BACKENDS = ("auto", "numba", "numpy")

# Measured on one core (see benchmarks/bench_kernels.py): the GEMM formulation
# of the convolutions beats direct numba loops about 5x, numba wins pooling
# 2-3x and the distance transform 25x.  Labeling is roughly even with the
# compiled scipy fallback.
AUTO_CHOICE = {
    "conv": "numpy",
    "pool": "numba",
    "edt": "numba",
    "label": "numba",
}


def _initial_backend() -> str:
    name = os.environ.get(ENV_VAR, "auto").strip().lower()
    if name not in BACKENDS:
        raise ValueError(f"{ENV_VAR} must be one of {BACKENDS}, got {name!r}")
    return name


_active = _initial_backend()


def get_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    _active = name


def resolve(family: str) -> str:
    """Concrete backend (``numba`` or ``numpy``) for a kernel family."""
    if _active == "auto":
        choice = AUTO_CHOICE[family]
        return choice if HAVE_NUMBA else "numpy"
    return _active


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily switch the kernel backend."""
    previous = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def njit(*args, **kwargs):
    """``numba.njit`` with on-disk caching, or a no-op decorator without numba."""
    kwargs.setdefault("cache", True)
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda fn: fn

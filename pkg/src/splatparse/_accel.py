"""Backend selection for the hot kernels.

Kernels come in two flavours: a numba-compiled loop and a vectorised numpy
path. Set ``SPLATPARSE_BACKEND=numpy`` (or ``SPLATPARSE_DISABLE_NUMBA=1``)
to force the numpy path, e.g. for debugging or on platforms without numba.
"""

from __future__ import annotations

import os

try:
    import numba

    # TBB shipped with some distros is too old for numba; prefer OpenMP
    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    _HAVE_NUMBA = False

BACKENDS = ("numba", "numpy")


def _env_backend() -> str:
    if os.environ.get("SPLATPARSE_DISABLE_NUMBA", "").lower() in ("1", "true", "yes"):
        return "numpy"
    choice = os.environ.get("SPLATPARSE_BACKEND", "numba").lower()
    if choice not in BACKENDS:
        raise ValueError(f"SPLATPARSE_BACKEND must be one of {BACKENDS}, got {choice!r}")
    if choice == "numba" and not _HAVE_NUMBA:
        return "numpy"
    return choice


DEFAULT_BACKEND = _env_backend()


def resolve_backend(backend: str | None) -> str:
    if backend is None:
        return DEFAULT_BACKEND
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not _HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    return backend


def set_num_threads(n: int | None) -> None:
    """Limit kernel worker threads. Output does not depend on the count."""
    if n is None or not _HAVE_NUMBA:
        return
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


if _HAVE_NUMBA:
    njit = numba.njit
    prange = numba.prange
else:  # pragma: no cover

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f

    prange = range

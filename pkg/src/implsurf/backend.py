"""Kernel backend selection.

Hot inner loops (trilinear gather/scatter, ray casting, nearest-neighbour
search, direct 3D convolution) exist twice: as numba ``@njit`` kernels and
as vectorized numpy code. ``IMPLSURF_BACKEND`` picks the implementation for
the whole process:

  auto   (default) numba kernels where they beat vectorized numpy on one
         core, BLAS-backed numpy where the operation is gemm-shaped
         (3D convolution, pointwise layers)
  numba  force the @njit path for every kernel that has one
  numpy  pure numpy everywhere (no numba import at all)

``benchmarks/bench_kernels.py`` measures both paths; the ``auto`` routing
reflects those measurements.
"""

from __future__ import annotations

import os

_ENV_VAR = "IMPLSURF_BACKEND"
_VALID = ("auto", "numba", "numpy")


def _detect() -> str:
    choice = os.environ.get(_ENV_VAR, "auto").strip().lower() or "auto"
    if choice not in _VALID:
        raise ValueError(f"{_ENV_VAR} must be one of {_VALID}, got {choice!r}")
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise
        return "numpy"
    return choice


BACKEND = _detect()


def numba_available() -> bool:
    return BACKEND in ("auto", "numba")


def kernel_source(gemm_shaped: bool = False) -> str:
    """Which implementation a kernel family should use under the current backend.

    gemm_shaped kernels default to the BLAS/numpy path in ``auto`` mode.
    """
    if BACKEND == "numpy":
        return "numpy"
    if BACKEND == "numba":
        return "numba"
    return "numpy" if gemm_shaped else "numba"


def set_num_threads(k: int) -> None:
    """Cap numba worker threads; no-op on the numpy backend."""
    if not numba_available():
        return
    import numba

    numba.set_num_threads(max(1, min(int(k), numba.config.NUMBA_NUM_THREADS)))

"""Facade over the two kernel backends.

Import hot kernels from here; the backend module decides which
implementation each family uses (see ``backend.BACKEND``).
"""

from __future__ import annotations

from . import backend
from ._kernels_numpy import RAY_DIRECTIONS  # noqa: F401  (shared constant)

if backend.kernel_source(gemm_shaped=False) == "numba":
    from ._kernels_numba import (  # noqa: F401
        nn_dists,
        ray_parity_inside,
        trilinear_gather,
        trilinear_scatter_add,
    )
else:
    from ._kernels_numpy import (  # noqa: F401
        nn_dists,
        ray_parity_inside,
        trilinear_gather,
        trilinear_scatter_add,
    )

# 3x3x3 convolutions are gemm-shaped: the BLAS-backed numpy path wins on a
# single core (see benchmarks/bench_kernels.py), so "auto" routes them there.
if backend.kernel_source(gemm_shaped=True) == "numba":
    from ._kernels_numba import conv3d_forward, conv3d_grad_weight  # noqa: F401
else:
    from ._kernels_numpy import conv3d_forward, conv3d_grad_weight  # noqa: F401

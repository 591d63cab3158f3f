"""Back-end selection for the compiled kernels.

The Cython extension is used when it imports; setting ``HSI_PURE_PYTHON=1``
forces the numpy fallback (handy for debugging and for benchmarks).
"""
import os

if os.environ.get("HSI_PURE_PYTHON", "") not in ("", "0"):
    from ._darcy_py import solve_batch as darcy_solve_batch
    BACKEND = "python"
else:
    try:
        from ._darcy_core import solve_batch as darcy_solve_batch
        BACKEND = "cython"
    except ImportError:
        from ._darcy_py import solve_batch as darcy_solve_batch
        BACKEND = "python"

__all__ = ["BACKEND", "darcy_solve_batch"]

"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the NumPy
fallback.  Setting ``SPDECTL_PURE_PYTHON=1`` forces the fallback.

The p-Laplace drift is two dense products around a pointwise power, so
the BLAS-backed NumPy version beats the compiled loop for every batch
size that matters; it is dispatched under both backends.  See
``benchmarks/bench_kernels.py``.
"""

import os

from . import _kernels_py

NOISE_NONE = _kernels_py.NOISE_NONE
NOISE_ADDITIVE = _kernels_py.NOISE_ADDITIVE
NOISE_MULTIPLICATIVE = _kernels_py.NOISE_MULTIPLICATIVE

_compiled = None
if os.environ.get("SPDECTL_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _kernels_py

plaplace_dual = _kernels_py.plaplace_dual
em_affine = _impl.em_affine


def backends():
    """Mapping of available backend names to kernel modules."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out

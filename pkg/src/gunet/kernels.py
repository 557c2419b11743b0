"""Backend selection for the segment reduction kernels.

Prefers the compiled Cython module, falls back to numpy.  Set
``GUNET_PURE_PYTHON=1`` to force the fallback (useful for benchmarking
and for debugging kernel-level discrepancies).
"""

import os

if os.environ.get("GUNET_PURE_PYTHON"):
    from gunet import _kernels_py as _impl
else:
    try:
        from gunet import _ckernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        from gunet import _kernels_py as _impl

BACKEND = _impl.BACKEND

segment_sum = _impl.segment_sum
segment_max = _impl.segment_max
index_add = _impl.index_add
max_grad_scatter = _impl.max_grad_scatter

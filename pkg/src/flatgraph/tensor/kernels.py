"""Kernel backend selection.

The compiled Cython module is used when it imports; otherwise (or when
``FLATGRAPH_PURE_PYTHON=1`` is set) the numpy/scipy fallback is used.
"""
import logging
import os

log = logging.getLogger(__name__)

if os.environ.get("FLATGRAPH_PURE_PYTHON", "") not in ("", "0"):
    from . import _fallback as _impl

    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        from . import _fallback as _impl

        BACKEND = "python"
        log.warning("compiled kernels unavailable; using the numpy fallback")

csr_spmm = _impl.csr_spmm
row_segment_sum = _impl.row_segment_sum
edge_logits = _impl.edge_logits
edge_softmax = _impl.edge_softmax
edge_softmax_backward = _impl.edge_softmax_backward
edge_aggregate = _impl.edge_aggregate
edge_aggregate_grad_att = _impl.edge_aggregate_grad_att

__all__ = [
    "BACKEND",
    "csr_spmm",
    "row_segment_sum",
    "edge_logits",
    "edge_softmax",
    "edge_softmax_backward",
    "edge_aggregate",
    "edge_aggregate_grad_att",
]

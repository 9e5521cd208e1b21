"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy versions in ``_pykernels``.  Set ``OGCLAB_PURE_PYTHON=1`` to force the
fallback.
"""
import os

if os.environ.get("OGCLAB_PURE_PYTHON", "") not in ("", "0"):
    from ogclab import _pykernels as _impl

    BACKEND = "python"
else:
    try:
        from ogclab import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        from ogclab import _pykernels as _impl

        BACKEND = "python"

em_fit = _impl.em_fit
clipped_ratio = _impl.clipped_ratio
clipped_ratios = _impl.clipped_ratios

__all__ = ["BACKEND", "em_fit", "clipped_ratio", "clipped_ratios"]

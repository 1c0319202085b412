"""Backend selection for the sliding-window kernels.

The compiled extension is used when it imports; otherwise the numpy fallback
takes over. Set ``MIXBALANCE_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

if os.environ.get("MIXBALANCE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
avgpool_forward = _impl.avgpool_forward
avgpool_backward = _impl.avgpool_backward

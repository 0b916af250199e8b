"""Hot numeric kernels with two interchangeable implementations.

``numba_ops`` holds @njit loop kernels, ``numpy_ops`` the pure-numpy
equivalents.  Selection happens once at import time: set ``SELFSV_NUMBA=0``
to force the numpy path (the default is numba when importable).
``benchmarks/kernel_bench.py`` times the two side by side.
"""

import os

from . import numpy_ops

_want_numba = os.environ.get("SELFSV_NUMBA", "1") != "0"

if _want_numba:
    try:
        from . import numba_ops as _impl
    except ImportError:
        _impl = numpy_ops
else:
    _impl = numpy_ops

conv1d_forward = _impl.conv1d_forward
conv1d_grad_input = _impl.conv1d_grad_input
conv1d_grad_weight = _impl.conv1d_grad_weight
nearest_centroid = _impl.nearest_centroid


def backend_name() -> str:
    return "numba" if _impl is not numpy_ops else "numpy"

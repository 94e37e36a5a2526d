"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Backend selection, checked once at import time:
  FEDROBUST_BACKEND=numba   jitted kernels (default when numba imports)
  FEDROBUST_BACKEND=numpy   im2col/BLAS fallback

`bench/bench_kernels.py` compares the two.
"""

import os

from . import numpy_impl

_requested = os.environ.get("FEDROBUST_BACKEND", "numba").lower()

if _requested == "numpy":
    _impl = numpy_impl
    BACKEND = "numpy"
elif _requested == "numba":
    try:
        from . import numba_impl as _impl
        BACKEND = "numba"
    except ImportError:
        _impl = numpy_impl
        BACKEND = "numpy"
else:
    raise ValueError(f"unknown FEDROBUST_BACKEND={_requested!r} (use 'numba' or 'numpy')")

conv2d_fwd = _impl.conv2d_fwd
conv2d_bwd_input = _impl.conv2d_bwd_input
conv2d_bwd_weight = _impl.conv2d_bwd_weight
avgpool_fwd = _impl.avgpool_fwd
avgpool_bwd = _impl.avgpool_bwd

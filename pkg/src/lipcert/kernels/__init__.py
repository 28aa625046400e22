"""Hot inner-loop kernels: im2col/col2im and pooling.

Two interchangeable backends live here.  ``numba_backend`` JIT-compiles the
loops, ``numpy_backend`` uses stride tricks and slice accumulation.  The
active backend is chosen once at import time:

* ``LIPCERT_KERNELS=numpy``  force the pure-numpy path
* ``LIPCERT_KERNELS=numba``  force numba (ImportError if unavailable)
* unset                      numba when importable, numpy otherwise

Both backends are importable directly for side-by-side benchmarking
(see ``benchmarks/kernel_bench.py``).
"""

import os

from . import numpy_backend

_choice = os.environ.get("LIPCERT_KERNELS", "").strip().lower()

if _choice == "numpy":
    _impl = numpy_backend
elif _choice == "numba":
    from . import numba_backend as _impl
else:
    try:
        from . import numba_backend as _impl
    except ImportError:
        _impl = numpy_backend

BACKEND = _impl.NAME

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
avgpool_forward = _impl.avgpool_forward
avgpool_backward = _impl.avgpool_backward

__all__ = [
    "BACKEND",
    "im2col",
    "col2im",
    "maxpool_forward",
    "maxpool_backward",
    "avgpool_forward",
    "avgpool_backward",
    "numpy_backend",
]

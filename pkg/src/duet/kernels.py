"""Pooling kernels: compiled extension when available, numpy otherwise.

Set ``DUET_PURE_PYTHON=1`` to force the numpy path.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DUET_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass

pool_forward = _impl.pool_forward
pool_backward = _impl.pool_backward

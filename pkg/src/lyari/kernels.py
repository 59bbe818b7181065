"""Hot-kernel dispatch: the compiled core when it was built, numpy otherwise.

Set ``LYARI_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
if not os.environ.get("LYARI_PURE_PYTHON"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

entropy_rate_batch = _impl.entropy_rate_batch
grid_search = _impl.grid_search

__all__ = ["BACKEND", "entropy_rate_batch", "grid_search"]

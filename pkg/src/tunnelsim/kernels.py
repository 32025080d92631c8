"""Hot-loop kernels: the compiled extension when importable, else pure Python.

Set ``TUNNELSIM_PURE=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _purepy

BACKEND = "python"

if os.environ.get("TUNNELSIM_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _speedups as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _purepy
else:
    _impl = _purepy

ones_complement_sum = _impl.ones_complement_sum
internet_checksum = _impl.internet_checksum
abs_diffs = _impl.abs_diffs
mean_var = _impl.mean_var

__all__ = ["BACKEND", "ones_complement_sum", "internet_checksum", "abs_diffs", "mean_var"]

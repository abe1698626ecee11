"""Kernel selection.

The compiled extension is used when it was built and importable; setting
``IMCI_PURE_PYTHON=1`` forces the numpy fallback (handy for comparisons).
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("IMCI_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

fnv1a64 = _impl.fnv1a64
fnv1a64_array = _impl.fnv1a64_array
bitpack = _impl.bitpack
bitunpack = _impl.bitunpack
visible_mask = _impl.visible_mask


def hash64(value: int) -> int:
    """Dispatch hash used by both replay phases (FNV-1a, 64-bit)."""
    return fnv1a64(value)

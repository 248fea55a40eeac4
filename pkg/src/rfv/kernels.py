"""Kernel backend selection.

The compiled extension is used when it was built; set ``RFV_PURE_PYTHON=1``
to force the numpy/scipy fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
if os.environ.get("RFV_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

rle_encode = _impl.rle_encode
rle_decode = _impl.rle_decode
label_components = _impl.label_components
mips_scan = _impl.mips_scan

__all__ = ["BACKEND", "rle_encode", "rle_decode", "label_components", "mips_scan"]

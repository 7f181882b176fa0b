"""Kernel backend selection.

The compiled extension is used when importable; set ``SSBANDIT_KERNELS=python``
to force the numpy fallback.
"""

import os

from . import _kernels_py

if os.environ.get("SSBANDIT_KERNELS", "").lower() == "python":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.NAME

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
rank_one_update = _impl.rank_one_update
sherman_morrison = _impl.sherman_morrison
quad_form = _impl.quad_form


def backends():
    """Every importable backend module, keyed by name."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        found["cython"] = _kernels
    return found

"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled module is used when it imports cleanly, unless the
environment variable ``DEFOCUS_RESTORE_PURE`` is set to a non-empty value
other than ``0``.  ``BACKEND`` names the active implementation.
"""

import os

from . import _kernels_py

_force_pure = os.environ.get("DEFOCUS_RESTORE_PURE", "") not in ("", "0")

try:
    if _force_pure:
        raise ImportError("pure backend requested")
    from . import _kernels_c as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"

j0 = _impl.j0
im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3
maxpool2x2_forward = _impl.maxpool2x2_forward
maxpool2x2_backward = _impl.maxpool2x2_backward
channel_moments = _impl.channel_moments
bn_train_forward = _impl.bn_train_forward
bn_backward = _impl.bn_backward


def backends():
    """Return every importable backend module keyed by name."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels_c
        found["cython"] = _kernels_c
    except ImportError:
        pass
    return found

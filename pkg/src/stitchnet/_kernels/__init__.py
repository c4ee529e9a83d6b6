"""Hot conv/pool kernels: compiled core with a pure-numpy fallback.

The backend is picked once at import. Set ``STITCHNET_PURE_PYTHON=1`` to force
the numpy implementation even when the compiled extension is present (used by
the benchmark and by backend-parity tests).
"""

import os

from . import pykernels

BACKEND = "python"
_impl = pykernels

if os.environ.get("STITCHNET_PURE_PYTHON", "") not in ("", "0"):
    _impl = pykernels
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]

        BACKEND = "native"
    except ImportError:
        _impl = pykernels

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool2d_forward = _impl.maxpool2d_forward
maxpool2d_backward = _impl.maxpool2d_backward

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool2d_forward",
    "maxpool2d_backward",
    "pykernels",
]

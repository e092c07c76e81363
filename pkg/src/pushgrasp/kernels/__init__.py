"""Convolution kernels with a compiled core and a pure-numpy fallback.

The compiled extension (``_convcore``, Cython) is preferred when it
imported cleanly; otherwise the numpy reference implementation is used.
Set ``PUSHGRASP_PURE_PYTHON=1`` to force the fallback.  Both backends
process batch samples independently, so results are bit-identical
between batched and per-sample calls within one backend.
"""

import os

from . import _reference

if os.environ.get("PUSHGRASP_PURE_PYTHON", "") not in ("", "0"):
    _impl = _reference
else:
    try:
        from . import _convcore as _impl
    except ImportError:
        _impl = _reference

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward


def backend_name() -> str:
    return "compiled" if _impl is not _reference else "numpy"


def get_backend(name: str):
    """Explicit backend lookup, used by parity tests and benchmarks."""
    if name == "numpy":
        return _reference
    if name == "compiled":
        from . import _convcore
        return _convcore
    raise ValueError(f"unknown backend {name!r}")

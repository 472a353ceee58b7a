"""Backend selection for the hot loops.

The compiled extension ``trajtensor._kernels`` is used when it was built;
otherwise, or when ``TRAJTENSOR_PURE_PYTHON=1`` is set in the environment,
the numpy reference implementation in ``_kernels_py`` is used.
"""
import os

from . import _kernels_py

if os.environ.get("TRAJTENSOR_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND
rts_backward = _impl.rts_backward
cp_sweep = _impl.cp_sweep


def available_backends():
    """Return the importable backend modules keyed by name."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        out["compiled"] = _kernels
    return out

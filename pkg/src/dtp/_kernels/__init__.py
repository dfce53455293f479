"""Kernel backend selection.

The compiled Cython extension is preferred when importable; the pure-numpy
fallback is always available.  Both produce bit-identical arrays.  Set
``DTP_KERNELS=python`` to force the fallback or ``DTP_KERNELS=compiled`` to
fail loudly when the extension is missing.
"""

import os

from . import fallback as _fallback

_forced = os.environ.get("DTP_KERNELS", "").strip().lower()

if _forced == "python":
    _impl = _fallback
    BACKEND = "python"
elif _forced not in ("", "compiled"):
    raise RuntimeError(
        f"DTP_KERNELS={_forced!r} not recognized; use 'compiled' or 'python'"
    )
else:
    try:
        from . import _core as _impl

        BACKEND = "compiled"
    except ImportError:
        if _forced == "compiled":
            raise
        _impl = _fallback
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2x2_forward = _impl.maxpool2x2_forward
maxpool2x2_backward = _impl.maxpool2x2_backward
upsample2x_forward = _impl.upsample2x_forward
upsample2x_backward = _impl.upsample2x_backward


def backend_name():
    """Which kernel implementation is active: 'compiled' or 'python'."""
    return BACKEND

"""Hot numeric kernels with a compiled core and a pure-numpy fallback.

The backend is chosen once at import: the Cython extension when it was
built, otherwise the numpy reference implementation. Set the environment
variable ``SEMIDET_KERNELS`` to ``ref`` or ``native`` to force one
(``native`` raises if the extension is unavailable).
"""

from __future__ import annotations

import os

from . import _ref

_requested = os.environ.get("SEMIDET_KERNELS", "auto").strip().lower() or "auto"
if _requested not in ("auto", "ref", "native"):
    raise ImportError(f"SEMIDET_KERNELS must be 'ref' or 'native', got {_requested!r}")

if _requested == "ref":
    _impl = _ref
else:
    try:
        from . import _corec as _impl  # type: ignore[no-redef]
    except ImportError:
        if _requested == "native":
            raise
        _impl = _ref

BACKEND: str = "ref" if _impl is _ref else "native"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
warp_affine_nearest = _impl.warp_affine_nearest
greedy_nms_mask = _impl.greedy_nms_mask

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward",
    "warp_affine_nearest",
    "greedy_nms_mask",
]

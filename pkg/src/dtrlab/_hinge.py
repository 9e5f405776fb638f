"""Hinge-loss solver backend selection.

Prefers the compiled coordinate-descent kernel and falls back to the
pure-Python implementation when the extension is unavailable.  Set the
environment variable ``DTRLAB_PURE=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _hinge_py

if os.environ.get("DTRLAB_PURE"):
    _impl = _hinge_py
    USING_COMPILED = False
else:
    try:
        from . import _hinge_cd as _impl  # type: ignore[no-redef]

        USING_COMPILED = True
    except ImportError:
        _impl = _hinge_py
        USING_COMPILED = False

linear_cd = _impl.linear_cd
kernel_cd = _impl.kernel_cd

__all__ = ["linear_cd", "kernel_cd", "USING_COMPILED"]

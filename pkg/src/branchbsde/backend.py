"""Select the sampling backend at import time.

The compiled core is used when it was built and imports cleanly; set
``BRANCHBSDE_BACKEND=python`` to force the pure-Python fallback.
"""

from __future__ import annotations

import os

from . import _pycore

_forced = os.environ.get("BRANCHBSDE_BACKEND", "").strip().lower()

try:
    if _forced == "python":
        raise ImportError("pure-Python backend requested")
    from . import _core as _compiled
except ImportError:
    _compiled = None

core = _compiled if _compiled is not None else _pycore
NAME = core.BACKEND


def has_compiled() -> bool:
    return _compiled is not None


def kernel_for(inp, backend: str | None = None):
    """Build a kernel; callable coefficient families always use Python."""
    choice = (backend or NAME).lower()
    if choice == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled core is not available")
        if not inp.compiled_ok:
            raise TypeError("compiled core needs registered coefficient families")
        return _compiled.Kernel(inp)
    if choice == "python" or _compiled is None or not inp.compiled_ok:
        return _pycore.Kernel(inp)
    return _compiled.Kernel(inp)

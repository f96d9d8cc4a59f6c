"""Kernel backend selection.

Imports the compiled extension when present, otherwise the numpy fallback.
Set MIXREC_PURE_PYTHON=1 to force the fallback (useful for benchmarking and
for debugging suspected kernel issues).
"""

import os

if os.environ.get("MIXREC_PURE_PYTHON") == "1":
    from . import _numpy as _impl
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _numpy as _impl

BACKEND = _impl.BACKEND_NAME
attention_forward = _impl.attention_forward
attention_backward = _impl.attention_backward
rmsnorm_forward = _impl.rmsnorm_forward
rmsnorm_backward = _impl.rmsnorm_backward


def get_backends():
    """Returns {name: module} for every importable backend (for parity tests)."""
    from . import _numpy

    out = {"numpy": _numpy}
    try:
        from . import _core  # type: ignore[attr-defined]

        out["compiled"] = _core
    except ImportError:
        pass
    return out

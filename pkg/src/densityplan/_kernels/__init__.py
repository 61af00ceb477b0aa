"""Kernel backend selection.

Prefers the compiled extension; falls back to the numpy implementation.
``DENSITYPLAN_PURE=1`` in the environment forces the fallback (useful for
benchmarking and debugging).
"""

import os

from . import pure

if os.environ.get("DENSITYPLAN_PURE", "") not in ("", "0"):
    _impl = pure
    BACKEND = "pure"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]
        BACKEND = "compiled"
    except ImportError:
        _impl = pure
        BACKEND = "pure"

CAR_PAR_LEN = pure.CAR_PAR_LEN

ref_rollout = _impl.ref_rollout
closed_rollout = _impl.closed_rollout
openloop_rollout = _impl.openloop_rollout
controller = pure.controller


def backend_name() -> str:
    """Name of the active rollout backend ("compiled" or "pure")."""
    return BACKEND

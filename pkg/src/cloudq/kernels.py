"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
NumPy/pure-Python ``_pykernels`` module takes over with identical results.
Set ``CLOUDQ_PURE=1`` to force the fallback.
"""

import os

from cloudq import _pykernels

if os.environ.get("CLOUDQ_PURE") == "1":
    _impl = _pykernels
else:
    try:
        from cloudq import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = _impl.BACKEND
rvi = _impl.rvi
simulate = _impl.simulate
greedy_actions = _pykernels.greedy_actions


def backends():
    """Map of available backend names to kernel modules."""
    out = {"python": _pykernels}
    try:
        from cloudq import _ckernels
    except ImportError:
        pass
    else:
        out["cython"] = _ckernels
    return out

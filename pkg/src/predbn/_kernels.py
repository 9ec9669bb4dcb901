"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``PREDBN_BACKEND=python`` to force the fallback.
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _pykernels


def _load_compiled() -> ModuleType | None:
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


_compiled = _load_compiled()

if _compiled is not None and os.environ.get("PREDBN_BACKEND", "").lower() != "python":
    _active: ModuleType = _compiled
else:
    _active = _pykernels

BACKEND: str = _active.BACKEND
matmul = _active.matmul
conv2d = _active.conv2d
conv2d_grad_input = _active.conv2d_grad_input
conv2d_grad_weight = _active.conv2d_grad_weight


def available_backends() -> dict[str, ModuleType]:
    """Every importable backend by name, compiled first."""
    found = {}
    if _compiled is not None:
        found[_compiled.BACKEND] = _compiled
    found[_pykernels.BACKEND] = _pykernels
    return found

"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. ``use_backend`` swaps the active module, mainly for parity tests
and benchmarks.
"""

from __future__ import annotations

import contextlib
from types import ModuleType

from . import _kernels_py

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS: dict[str, ModuleType] = {"python": _kernels_py}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

kernels: ModuleType = _BACKENDS.get("cython", _kernels_py)


def available() -> list[str]:
    return sorted(_BACKENDS)


def current() -> str:
    return "cython" if kernels is _ckernels and _ckernels is not None else "python"


def set_backend(name: str) -> None:
    global kernels
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available (have {available()})")
    kernels = _BACKENDS[name]


@contextlib.contextmanager
def use_backend(name: str):
    prev = current()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)

"""Hot numeric kernels with switchable backends.

Two implementations of every kernel exist: a numba @njit version and a pure
numpy fallback. Selection is controlled by the MEMVOS_KERNELS environment
variable read at import time:

  MEMVOS_KERNELS=numba   force the jit kernels everywhere
  MEMVOS_KERNELS=numpy   force the numpy fallbacks everywhere
  unset / auto           per-kernel defaults: convolutions use the numpy
                         im2col path (BLAS wins at these channel counts),
                         morphology and rasterization use numba

`set_backend()` overrides the choice at runtime (used by the tests and by
benchmarks/bench_kernels.py, which measures both sides).
"""

from __future__ import annotations

import os

from . import numpy_backend

try:
    from . import numba_backend
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
    numba_backend = None
    HAS_NUMBA = False

_CONV_KERNELS = ("conv2d_forward", "conv2d_backward_input", "conv2d_backward_weight")
_LOOP_KERNELS = ("dilate_disk", "fill_polygon", "fill_ellipse")

_backend_name = "auto"
_table: dict[str, object] = {}


def _rebuild(name: str) -> None:
    global _backend_name, _table
    if name not in ("auto", "numpy", "numba"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    table = {}
    for fn in _CONV_KERNELS + _LOOP_KERNELS:
        if name == "numpy":
            impl = numpy_backend
        elif name == "numba":
            impl = numba_backend
        else:
            fast_loops = numba_backend if HAS_NUMBA else numpy_backend
            impl = numpy_backend if fn in _CONV_KERNELS else fast_loops
        table[fn] = getattr(impl, fn)
    _backend_name = name
    _table = table


def set_backend(name: str) -> None:
    _rebuild(name)


def active_backend() -> str:
    return _backend_name


_rebuild(os.environ.get("MEMVOS_KERNELS", "auto").strip().lower() or "auto")


def conv2d_forward(xp, w, stride):
    return _table["conv2d_forward"](xp, w, stride)


def conv2d_backward_input(dy, w, stride, hp, wp):
    return _table["conv2d_backward_input"](dy, w, stride, hp, wp)


def conv2d_backward_weight(xp, dy, stride, kh, kw):
    return _table["conv2d_backward_weight"](xp, dy, stride, kh, kw)


def dilate_disk(mask, radius):
    return _table["dilate_disk"](mask, radius)


def fill_polygon(h, w, ys, xs):
    return _table["fill_polygon"](h, w, ys, xs)


def fill_ellipse(h, w, cy, cx, ry, rx, theta):
    return _table["fill_ellipse"](h, w, cy, cx, ry, rx, theta)

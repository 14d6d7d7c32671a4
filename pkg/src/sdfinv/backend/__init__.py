"""Backend selection for the bilinear grid kernels.

The compiled Cython extension is preferred when importable; the numpy
fallback has identical semantics. ``SDFINV_BACKEND=python`` or ``=compiled``
forces a choice (the latter raises if the extension is unavailable).
"""

import os

import numpy as np

from . import numpy_kernels

_choice = os.environ.get("SDFINV_BACKEND", "auto")

_compiled = None
if _choice in ("auto", "compiled"):
    try:
        from . import _gridkernels as _compiled
    except ImportError:
        if _choice == "compiled":
            raise
        _compiled = None

ACTIVE = "compiled" if _compiled is not None else "python"


def _as2d(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


if _compiled is not None:

    def gather(grid, uv, zero_outside=False):
        grid = np.ascontiguousarray(grid)
        uv = _as2d(uv, grid.dtype)
        out = np.empty((uv.shape[0], grid.shape[0]), dtype=grid.dtype)
        _compiled.gather(grid, uv, zero_outside, out)
        return out

    def gather_duv(grid, uv, zero_outside=False):
        grid = np.ascontiguousarray(grid)
        uv = _as2d(uv, grid.dtype)
        duv = np.empty((uv.shape[0], grid.shape[0], 2), dtype=grid.dtype)
        _compiled.gather_duv(grid, uv, zero_outside, duv)
        return duv

    def gather_bwd(grid, uv, zero_outside, gout):
        grid = np.ascontiguousarray(grid)
        uv = _as2d(uv, grid.dtype)
        gout = np.ascontiguousarray(gout, dtype=grid.dtype)
        ggrid = np.zeros_like(grid)
        guv = np.zeros_like(uv)
        _compiled.gather_bwd(grid, uv, zero_outside, gout, ggrid, guv)
        return ggrid, guv

    def gather_duv_bwd(grid, uv, zero_outside, gduv):
        grid = np.ascontiguousarray(grid)
        uv = _as2d(uv, grid.dtype)
        gduv = np.ascontiguousarray(gduv, dtype=grid.dtype)
        ggrid = np.zeros_like(grid)
        guv = np.zeros_like(uv)
        _compiled.gather_duv_bwd(grid, uv, zero_outside, gduv, ggrid, guv)
        return ggrid, guv

else:
    def _np_call(fn, grid, uv, *rest):
        return fn(np.ascontiguousarray(grid),
                  _as2d(uv, grid.dtype), *rest)

    def gather(grid, uv, zero_outside=False):
        return _np_call(numpy_kernels.gather, grid, uv, zero_outside)

    def gather_duv(grid, uv, zero_outside=False):
        return _np_call(numpy_kernels.gather_duv, grid, uv, zero_outside)

    def gather_bwd(grid, uv, zero_outside, gout):
        return _np_call(numpy_kernels.gather_bwd, grid, uv, zero_outside,
                        np.asarray(gout, dtype=grid.dtype))

    def gather_duv_bwd(grid, uv, zero_outside, gduv):
        return _np_call(numpy_kernels.gather_duv_bwd, grid, uv, zero_outside,
                        np.asarray(gduv, dtype=grid.dtype))

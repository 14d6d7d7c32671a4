"""Pure-numpy bilinear grid kernels (fallback backend).

Semantics shared with the compiled backend:

* ``grid`` is (C, H, W), ``uv`` is (N, 2) with u along width and v along
  height, both in [-1, 1] mapping to texel centers 0 .. W-1 / 0 .. H-1
  (align-corners convention, so uv at an exact texel corner returns that
  texel's value).
* ``zero_outside=False``: coordinates are clamped to the border; the spatial
  derivative is zero strictly outside the domain.
* ``zero_outside=True``: out-of-range texels read as zero (used for
  image-space warps over a black background).
"""

import numpy as np


def _corners(grid_shape, uv, zero_outside):
    """Per-corner flat indices, weights and weight derivatives.

    Returns (idx, w, dwdu, dwdv, dwduv), each (4, N). dwdu/dwdv include the
    [-1,1] -> texel chain factor; dwduv is the mixed second derivative.
    """
    _, H, W = grid_shape
    dt = uv.dtype
    sx = dt.type(0.5 * (W - 1))
    sy = dt.type(0.5 * (H - 1))
    gx = (uv[:, 0] + 1) * sx
    gy = (uv[:, 1] + 1) * sy

    if zero_outside:
        x0 = np.floor(gx)
        y0 = np.floor(gy)
        fx = gx - x0
        fy = gy - y0
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        vx0 = (x0 >= 0) & (x0 <= W - 1)
        vx1 = (x0 + 1 >= 0) & (x0 + 1 <= W - 1)
        vy0 = (y0 >= 0) & (y0 <= H - 1)
        vy1 = (y0 + 1 >= 0) & (y0 + 1 <= H - 1)
        mx = np.ones_like(gx)
        my = np.ones_like(gy)
    else:
        gx = np.clip(gx, 0, W - 1)
        gy = np.clip(gy, 0, H - 1)
        x0 = np.minimum(np.floor(gx), W - 2).astype(np.int64)
        y0 = np.minimum(np.floor(gy), H - 2).astype(np.int64)
        fx = gx - x0
        fy = gy - y0
        vx0 = vx1 = vy0 = vy1 = np.ones_like(gx, dtype=bool)
        # derivative masks: zero strictly outside the domain
        mx = ((uv[:, 0] >= -1) & (uv[:, 0] <= 1)).astype(dt)
        my = ((uv[:, 1] >= -1) & (uv[:, 1] <= 1)).astype(dt)

    x0c = np.clip(x0, 0, W - 1)
    x1c = np.clip(x0 + 1, 0, W - 1)
    y0c = np.clip(y0, 0, H - 1)
    y1c = np.clip(y0 + 1, 0, H - 1)

    ax = np.stack([(1 - fx) * vx0, fx * vx1])            # (2, N)
    ay = np.stack([(1 - fy) * vy0, fy * vy1])
    dax = np.stack([-sx * mx * vx0, sx * mx * vx1])
    day = np.stack([-sy * my * vy0, sy * my * vy1])
    xi = np.stack([x0c, x1c])
    yi = np.stack([y0c, y1c])

    # corner order: (y0,x0), (y0,x1), (y1,x0), (y1,x1)
    cy = np.array([0, 0, 1, 1])
    cx = np.array([0, 1, 0, 1])
    idx = yi[cy] * W + xi[cx]
    w = ay[cy] * ax[cx]
    dwdu = ay[cy] * dax[cx]
    dwdv = day[cy] * ax[cx]
    dwduv = day[cy] * dax[cx]
    return idx, w, dwdu, dwdv, dwduv


def gather(grid, uv, zero_outside=False):
    C = grid.shape[0]
    flat = grid.reshape(C, -1)
    idx, w, _, _, _ = _corners(grid.shape, uv, zero_outside)
    out = np.zeros((uv.shape[0], C), dtype=grid.dtype)
    for k in range(4):
        out += flat[:, idx[k]].T * w[k][:, None]
    return out


def gather_duv(grid, uv, zero_outside=False):
    C = grid.shape[0]
    flat = grid.reshape(C, -1)
    idx, _, dwdu, dwdv, _ = _corners(grid.shape, uv, zero_outside)
    duv = np.zeros((uv.shape[0], C, 2), dtype=grid.dtype)
    for k in range(4):
        vals = flat[:, idx[k]].T
        duv[:, :, 0] += vals * dwdu[k][:, None]
        duv[:, :, 1] += vals * dwdv[k][:, None]
    return duv


def _scatter(grid_shape, idx, coeff, gout, dtype):
    """Accumulate gout (N, C) * coeff (4, N) into a (C, H, W) gradient."""
    C, H, W = grid_shape
    ggrid = np.zeros((C, H * W), dtype=dtype)
    idx_all = idx.ravel()
    for c in range(C):
        wts = (coeff * gout[:, c]).ravel()
        ggrid[c] = np.bincount(idx_all, weights=wts, minlength=H * W)
    return ggrid.reshape(C, H, W)


def gather_bwd(grid, uv, zero_outside, gout):
    C = grid.shape[0]
    flat = grid.reshape(C, -1)
    idx, w, dwdu, dwdv, _ = _corners(grid.shape, uv, zero_outside)
    ggrid = _scatter(grid.shape, idx, w, gout, grid.dtype)
    guv = np.zeros_like(uv)
    for k in range(4):
        vals = flat[:, idx[k]].T
        proj = np.einsum("nc,nc->n", gout, vals)
        guv[:, 0] += proj * dwdu[k]
        guv[:, 1] += proj * dwdv[k]
    return ggrid, guv


def gather_duv_bwd(grid, uv, zero_outside, gduv):
    C = grid.shape[0]
    flat = grid.reshape(C, -1)
    idx, _, dwdu, dwdv, dwduv = _corners(grid.shape, uv, zero_outside)
    ggrid = _scatter(grid.shape, idx, dwdu, gduv[:, :, 0], grid.dtype)
    ggrid += _scatter(grid.shape, idx, dwdv, gduv[:, :, 1], grid.dtype)
    # only the mixed term d2/dudv survives; d2/du2 = d2/dv2 = 0
    guv = np.zeros_like(uv)
    for k in range(4):
        vals = flat[:, idx[k]].T
        cross = dwduv[k]
        guv[:, 1] += np.einsum("nc,nc->n", gduv[:, :, 0], vals) * cross
        guv[:, 0] += np.einsum("nc,nc->n", gduv[:, :, 1], vals) * cross
    return ggrid, guv

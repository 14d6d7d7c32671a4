"""Differentiable volume rendering of RGB, mask, canonical map, semantics, depth.

Emission-absorption quadrature over per-ray samples between the bounding-cube
intersections. The whole pass is one tape graph, so gradients reach both the
field parameters and every pose parameter. Fine samples come from inverse-CDF
importance resampling of the coarse weights; their positions are detached by
default (values stay differentiable) and become differentiable through the
weights when ``differentiable_positions`` is set.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .geometry import Camera, generate_rays


@dataclass
class RenderConfig:
    n_coarse: int = 32
    n_fine: int = 32
    t_near: float = None          # None: per-ray bounding-cube intersection
    t_far: float = None
    stratified: bool = True
    seed: int = 0
    differentiable_positions: bool = False

    def __post_init__(self):
        if self.n_coarse < 2:
            raise ValueError("n_coarse must be >= 2")
        if (self.t_near is not None and self.t_far is not None
                and not self.t_near < self.t_far):
            raise ValueError("t_near must be < t_far")


@dataclass
class RenderOutput:
    rgb: object          # (H,W,3)
    mask: object         # (H,W)
    canonical: object    # (H,W,3)
    semantic: object     # (H,W,S)
    depth: object        # (H,W)

    def numpy(self):
        def v(t):
            if t is None:
                return None
            return t.value.copy() if isinstance(t, Tensor) else np.asarray(t)
        return RenderOutput(v(self.rgb), v(self.mask), v(self.canonical),
                            v(self.semantic), v(self.depth))


_SM1 = np.uint64(0x9E3779B97F4A7C15)
_SM2 = np.uint64(0xBF58476D1CE4E5B9)
_SM3 = np.uint64(0x94D049BB133111EB)


def _splitmix(x):
    x = (x + _SM1).astype(np.uint64)
    x = ((x ^ (x >> np.uint64(30))) * _SM2).astype(np.uint64)
    x = ((x ^ (x >> np.uint64(27))) * _SM3).astype(np.uint64)
    return x ^ (x >> np.uint64(31))


def counter_uniform(seed, ray_index, sample_index, tag=0):
    """Order-independent per-(ray, sample) uniforms in [0,1).

    Counter-based so parallel and serial renders draw identical numbers.
    """
    with np.errstate(over="ignore"):
        s = _splitmix(np.asarray(int(seed) & 0xFFFFFFFFFFFFFFFF,
                                 dtype=np.uint64).reshape(()))
        r = _splitmix(np.asarray(ray_index, dtype=np.uint64) ^ s)
        k = _splitmix((np.asarray(sample_index, dtype=np.uint64)
                       + np.uint64(tag) * _SM1) ^ r)
    return (k >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def sdf_to_density(d, alpha, beta):
    """VolSDF transform: sigma = (1/alpha) * Psi_beta(-d).

    Psi_beta is the zero-mean Laplace CDF with scale beta:
    Psi(s) = 0.5 exp(s/beta) for s <= 0, 1 - 0.5 exp(-s/beta) otherwise.
    """
    d, alpha, beta = as_tensor(d), as_tensor(alpha), as_tensor(beta)
    s = ad.mul(d, -1.0)
    e = ad.exp(ad.div(ad.mul(ad.absolute(s), -1.0), beta))
    psi = ad.where(s.value <= 0, ad.mul(e, 0.5), ad.sub(1.0, ad.mul(e, 0.5)))
    return ad.div(psi, alpha)


def _stratified_positions(t0, t1, n, seed, stratified):
    """Coarse depths t0 + (t1-t0) * (i + jitter)/n; jitter is counter-based."""
    nrays = t0.value.shape[0]
    dtype = t0.value.dtype
    idx = np.arange(nrays, dtype=np.uint64)[:, None]
    samp = np.arange(n, dtype=np.uint64)[None, :]
    if stratified:
        off = counter_uniform(seed, np.broadcast_to(idx, (nrays, n)),
                              np.broadcast_to(samp, (nrays, n)), tag=0)
    else:
        off = np.full((nrays, n), 0.5)
    frac = ((np.arange(n)[None, :] + off) / n).astype(dtype)
    t0c = ad.reshape(t0, (nrays, 1))
    t1c = ad.reshape(t1, (nrays, 1))
    span = ad.sub(t1c, t0c)
    return ad.add(t0c, ad.mul(span, ad.constant(frac)))


def _sample_fine(t, w, n_fine, seed, differentiable):
    """Inverse-CDF resampling of the piecewise-constant coarse weight PDF."""
    nrays, nc = t.value.shape
    dtype = t.value.dtype
    eps = 1e-5
    idx = np.arange(nrays, dtype=np.uint64)[:, None]
    samp = np.arange(n_fine, dtype=np.uint64)[None, :]
    u = counter_uniform(seed, np.broadcast_to(idx, (nrays, n_fine)),
                        np.broadcast_to(samp, (nrays, n_fine)), tag=1)
    u = u.astype(dtype)

    w_np = w.value[:, :-1] + eps
    pdf_np = w_np / w_np.sum(axis=1, keepdims=True)
    cdf_np = np.cumsum(pdf_np, axis=1)
    cdf_np[:, -1] = 1.0
    # row-wise searchsorted via offset trick
    nb = nc - 1
    rows = np.arange(nrays)[:, None]
    flat = (cdf_np + rows * 2.0).ravel()
    k = np.searchsorted(flat, (u + rows * 2.0).ravel(), side="right")
    k = (k - rows.ravel().repeat(n_fine) * nb).reshape(nrays, n_fine)
    k = np.clip(k, 0, nb - 1)

    if not differentiable:
        cdf_lo = np.concatenate(
            [np.zeros((nrays, 1), dtype=dtype), cdf_np[:, :-1]], axis=1)
        lo = np.take_along_axis(cdf_lo, k, axis=1)
        pk = np.take_along_axis(pdf_np, k, axis=1)
        tk = np.take_along_axis(t.value, k, axis=1)
        tk1 = np.take_along_axis(t.value, k + 1, axis=1)
        frac = (u - lo) / pk
        return ad.constant((tk + frac * (tk1 - tk)).astype(dtype))

    w_t = ad.add(w[:, :-1], eps)
    pdf = ad.div(w_t, ad.sum_(w_t, axis=1, keepdims=True))
    cdf = ad.cumsum(pdf, axis=1)
    zeros = ad.constant(np.zeros((nrays, 1), dtype=dtype))
    cdf_lo = ad.concatenate([zeros, cdf[:, :-1]], axis=1)
    lo = ad.take_along(cdf_lo, k, axis=1)
    pk = ad.take_along(pdf, k, axis=1)
    tk = ad.take_along(t, k, axis=1)
    tk1 = ad.take_along(t, k + 1, axis=1)
    frac = ad.div(ad.sub(ad.constant(u), lo), pk)
    return ad.add(tk, ad.mul(frac, ad.sub(tk1, tk)))


def _composite(t, t_far, quantities, weights_only=False):
    """Quadrature weights w_i = T_i (1 - exp(-sigma_i delta_i)) and sums."""
    nrays, n = t.value.shape
    sigma = quantities["sigma"]
    dt_inner = ad.sub(t[:, 1:], t[:, :-1])
    dt_last = ad.reshape(ad.sub(t_far, t[:, -1]), (nrays, 1))
    delta = ad.concatenate([dt_inner, ad.maximum(dt_last, 0.0)], axis=1)
    sd = ad.mul(sigma, delta)
    csum = ad.cumsum(sd, axis=1)
    zeros = ad.constant(np.zeros((nrays, 1), dtype=t.value.dtype))
    transmittance = ad.exp(ad.mul(
        ad.concatenate([zeros, csum[:, :-1]], axis=1), -1.0))
    absorb = ad.sub(1.0, ad.exp(ad.mul(sd, -1.0)))
    w = ad.mul(transmittance, absorb)
    if weights_only:
        return w
    out = {"weights": w, "mask": ad.sum_(w, axis=1)}
    w3 = ad.reshape(w, (nrays, n, 1))
    for name, vals in quantities.items():
        if name == "sigma" or vals is None:
            continue
        if vals.value.ndim == 2:  # per-sample scalars, e.g. depth uses t
            out[name] = ad.sum_(ad.mul(w, vals), axis=1)
        else:
            out[name] = ad.sum_(ad.mul(w3, vals), axis=1)
    return out


ALL_OUTPUTS = ("rgb", "mask", "canonical", "semantic", "depth")


def _query_pass(field, pts_flat, dirs, nrays, n, need_color):
    view = None
    if getattr(field, "has_view_branch", False):
        d3 = ad.reshape(dirs, (nrays, 1, 3))
        rep = ad.mul(d3, ad.constant(
            np.ones((1, n, 1), dtype=pts_flat.value.dtype)))
        view = ad.reshape(rep, (nrays * n, 3))
    q = field.query(pts_flat, view, need_color=need_color)
    out = {"d": q["d"]}
    if need_color:
        s = q["sem"].value.shape[1]
        out["rgb"] = ad.reshape(q["rgb"], (nrays, n, 3))
        out["sem"] = ad.reshape(q["sem"], (nrays, n, s))
    return out


def _field_dtype(field):
    a = getattr(field, "alpha", None)
    if isinstance(a, Tensor):
        return a.value.dtype
    return np.dtype(np.float64)


def render_rays(field, origins, dirs, t0, t1, cfg: RenderConfig,
                outputs=ALL_OUTPUTS):
    nrays = origins.value.shape[0]
    need_color = "rgb" in outputs or "semantic" in outputs
    alpha = as_tensor(field.alpha)
    beta = as_tensor(field.beta)

    def run_pass(t):
        n = t.value.shape[1]
        o3 = ad.reshape(origins, (nrays, 1, 3))
        d3 = ad.reshape(dirs, (nrays, 1, 3))
        pts = ad.add(o3, ad.mul(d3, ad.reshape(t, (nrays, n, 1))))
        pts_flat = ad.reshape(pts, (nrays * n, 3))
        q = _query_pass(field, pts_flat, dirs, nrays, n, need_color)
        sigma = ad.reshape(sdf_to_density(q["d"], alpha, beta), (nrays, n))
        return pts, q, sigma

    t_coarse = _stratified_positions(t0, t1, cfg.n_coarse, cfg.seed,
                                     cfg.stratified)
    pts, q, sigma = run_pass(t_coarse)
    if cfg.n_fine > 0:
        w = _composite(t_coarse, t1, {"sigma": sigma}, weights_only=True)
        if not cfg.differentiable_positions:
            w = ad.constant(w.value)
        t_fine = _sample_fine(t_coarse, w, cfg.n_fine, cfg.seed,
                              cfg.differentiable_positions)
        pts_f, q_f, sigma_f = run_pass(t_fine)
        # merge the two passes in depth order (pure permutation, so the
        # backward is a gather as well)
        t_cat = ad.concatenate([t_coarse, t_fine], axis=1)
        perm = np.argsort(t_cat.value, axis=1, kind="stable")
        t_all = ad.permute_along(t_cat, perm, axis=1)
        sigma = ad.permute_along(ad.concatenate([sigma, sigma_f], axis=1),
                                 perm, axis=1)
        pts = ad.permute_along(ad.concatenate([pts, pts_f], axis=1),
                               perm, axis=1)
        if need_color:
            q = {
                "rgb": ad.permute_along(
                    ad.concatenate([q["rgb"], q_f["rgb"]], axis=1), perm, 1),
                "sem": ad.permute_along(
                    ad.concatenate([q["sem"], q_f["sem"]], axis=1), perm, 1),
            }
    else:
        t_all = t_coarse

    comp = _composite(t_all, t1, {
        "sigma": sigma,
        "rgb": q["rgb"] if need_color and "rgb" in outputs else None,
        "sem": q["sem"] if need_color and "semantic" in outputs else None,
        "canonical": pts if "canonical" in outputs else None,
        "depth": t_all if "depth" in outputs else None,
    })
    return comp


def render(field, cam: Camera, cfg: RenderConfig, width=64, height=64,
           outputs=ALL_OUTPUTS) -> RenderOutput:
    """Render a full image as one differentiable graph."""
    dtype = np.dtype(_field_dtype(field))
    view = ad.astype(as_tensor(cam.view), dtype)
    focal = ad.astype(as_tensor(cam.focal), dtype)
    s = ad.astype(as_tensor(cam.s), dtype) if isinstance(cam.s, Tensor) else cam.s
    t2 = ad.astype(as_tensor(cam.t2), dtype) if isinstance(cam.t2, Tensor) else cam.t2
    cam = Camera(view=view, focal=focal, projection_mode=cam.projection_mode,
                 s=s, t2=t2)
    rays = generate_rays(cam, width, height, dtype=dtype)
    t0, t1 = rays.t_near, ad.maximum(rays.t_far, rays.t_near)
    if cfg.t_near is not None:
        t0 = ad.maximum(t0, cfg.t_near)
    if cfg.t_far is not None:
        t1 = ad.maximum(ad.minimum(t1, cfg.t_far), t0)
    comp = render_rays(field, rays.origins, rays.dirs, t0, t1, cfg, outputs)
    h, w = height, width

    def shaped(name, tail):
        if name not in comp:
            return None
        return ad.reshape(comp[name], (h, w) + tail)

    return RenderOutput(
        rgb=shaped("rgb", (3,)),
        mask=shaped("mask", ()),
        canonical=shaped("canonical", (3,)),
        semantic=(ad.reshape(comp["sem"], (h, w, comp["sem"].value.shape[-1]))
                  if "sem" in comp else None),
        depth=shaped("depth", ()),
    )


def render_with_color_swap(field, cam: Camera, cfg: RenderConfig, v_override,
                           width=64, height=64) -> RenderOutput:
    """Apply a swapped color distribution after rendering.

    The color map is linear in the values, so semantic @ V_override equals
    re-rendering with the swapped V (up to float tolerance).
    """
    v = as_tensor(v_override)
    n_sem = getattr(field, "n_semantic", None)
    if v.value.shape != (n_sem, 3):
        raise ad.GraphError(
            f"V_override must be ({n_sem}, 3), got {v.value.shape}")
    out = render(field, cam, cfg, width, height)
    h, w = out.mask.value.shape
    sem_flat = ad.reshape(out.semantic, (h * w, n_sem))
    rgb = ad.reshape(ad.matmul(sem_flat, v), (h, w, 3))
    return RenderOutput(rgb=rgb, mask=out.mask, canonical=out.canonical,
                        semantic=out.semantic, depth=out.depth)


def render_image(field, cam: Camera, cfg: RenderConfig, width=64, height=64,
                 chunk=8192, outputs=ALL_OUTPUTS) -> RenderOutput:
    """Non-differentiable convenience render (chunked, returns numpy)."""
    with ad.no_grad():
        if width * height <= chunk:
            return render(field, cam, cfg, width, height, outputs).numpy()
        dtype = np.dtype(_field_dtype(field))
        rays = generate_rays(Camera(
            view=ad.astype(as_tensor(cam.view), dtype),
            focal=ad.astype(as_tensor(cam.focal), dtype),
            projection_mode=cam.projection_mode, s=cam.s, t2=cam.t2),
            width, height, dtype=dtype)
        t1 = ad.maximum(rays.t_far, rays.t_near)
        n = width * height
        pieces = []
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            comp = render_rays(
                field, rays.origins[lo:hi], rays.dirs[lo:hi],
                rays.t_near[lo:hi], t1[lo:hi],
                replace(cfg), outputs)
            pieces.append(comp)

        def cat(name, shape):
            if name not in pieces[0]:
                return None
            return np.concatenate(
                [p[name].value for p in pieces], axis=0).reshape(shape)

        sdim = (pieces[0]["sem"].value.shape[-1] if "sem" in pieces[0] else 0)
        return RenderOutput(
            rgb=cat("rgb", (height, width, 3)),
            mask=cat("mask", (height, width)),
            canonical=cat("canonical", (height, width, 3)),
            semantic=cat("sem", (height, width, sdim)),
            depth=cat("depth", (height, width)),
        )

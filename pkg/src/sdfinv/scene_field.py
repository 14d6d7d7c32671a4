"""Latent code -> triplanar SDF field with attention-based color mapping.

The generator stack is deliberately desk-scale: a 2-layer mapping MLP, one
linear layer per feature plane (which is also the W+ layer granularity, plus
one layer for the color/value network), and a tiny decoder MLP producing the
signed distance, a semantic key vector, and an optional view-fusion feature.
RGB comes out of softmax(key . Q^T) @ V, so colors stay linear in V and can
be swapped between identities.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, as_tensor
from .optim import Adam

# W+ layer order: one latent vector per feature plane, one for the color net
WPLUS_LAYERS = ("plane_xy", "plane_xz", "plane_yz", "color")


class PretrainDivergenceError(RuntimeError):
    pass


@dataclass
class FieldConfig:
    dim_z: int = 64
    dim_w: int = 64
    plane_channels: int = 16
    plane_res: int = 32
    n_semantic: int = 8
    key_dim: int = 16
    hidden: int = 64
    fusion_dim: int = 32
    view_branch: bool = False
    # latent->plane sensitivity at init; sets how hot latent steps are
    latent_plane_scale: float = 0.3
    # identity-block init for the value network: the leading 3*n_semantic
    # latent coordinates drive V directly (well-conditioned color control)
    color_identity_init: bool = False
    dtype: str = "float32"

    def np_dtype(self):
        return np.dtype(self.dtype)


class LatentCode:
    """Single shared vector (W) or one vector per generator layer (W+)."""

    def __init__(self, tensor, mode="W"):
        tensor = as_tensor(tensor)
        if mode == "W":
            if tensor.value.ndim != 1:
                raise ValueError("W-mode latent must be a vector")
        elif mode == "W_plus":
            if tensor.value.ndim != 2 or tensor.value.shape[0] != len(WPLUS_LAYERS):
                raise ValueError(
                    f"W+ latent must be ({len(WPLUS_LAYERS)}, dim_w)")
        else:
            raise ValueError(f"unknown latent mode {mode!r}")
        self.tensor = tensor
        self.mode = mode

    @property
    def dim(self):
        return self.tensor.value.shape[-1]

    def layer(self, name):
        if self.mode == "W":
            return self.tensor
        i = WPLUS_LAYERS.index(name)
        return self.tensor[i]

    def to_wplus(self):
        if self.mode == "W_plus":
            return self
        tiled = ad.stack([self.tensor] * len(WPLUS_LAYERS), axis=0)
        return LatentCode(tiled, mode="W_plus")

    def numpy(self):
        return self.tensor.value.copy()


def _linear(rng, n_in, n_out, scale, dtype, name):
    w = Parameter((rng.standard_normal((n_in, n_out)) * scale).astype(dtype),
                  name=f"{name}.w")
    b = Parameter(np.zeros(n_out, dtype=dtype), name=f"{name}.b")
    return w, b


def _apply(x, w, b):
    return ad.add(ad.matmul(x, w), b)


class FieldGenerator:
    """All learnable pieces: mapping, plane decode, decoder, color mapper."""

    def __init__(self, cfg: FieldConfig = None, seed=0):
        self.cfg = cfg or FieldConfig()
        c = self.cfg
        dt = c.np_dtype()
        rng = np.random.default_rng(seed)
        pdim = c.plane_channels * c.plane_res * c.plane_res

        self.map_w1, self.map_b1 = _linear(rng, c.dim_z, c.dim_w,
                                           1.0 / np.sqrt(c.dim_z), dt, "map1")
        self.map_w2, self.map_b2 = _linear(rng, c.dim_w, c.dim_w,
                                           1.0 / np.sqrt(c.dim_w), dt, "map2")
        self.plane_w = {}
        self.plane_b = {}
        for name in WPLUS_LAYERS[:3]:
            w, b = _linear(rng, c.dim_w, pdim,
                           c.latent_plane_scale / np.sqrt(c.dim_w), dt, name)
            b.value = (rng.standard_normal(pdim) * 0.1).astype(dt)
            self.plane_w[name], self.plane_b[name] = w, b

        self.dec_w1, self.dec_b1 = _linear(rng, c.plane_channels, c.hidden,
                                           1.0 / np.sqrt(c.plane_channels), dt, "dec1")
        self.dec_w2, self.dec_b2 = _linear(rng, c.hidden, c.hidden,
                                           1.0 / np.sqrt(c.hidden), dt, "dec2")
        self.sdf_w, self.sdf_b = _linear(rng, c.hidden, 1,
                                         1.0 / np.sqrt(c.hidden), dt, "sdf")
        self.fuse_w, self.fuse_b = _linear(rng, c.hidden, c.fusion_dim,
                                           1.0 / np.sqrt(c.hidden), dt, "fuse")
        self.key_w, self.key_b = _linear(rng, c.fusion_dim, c.key_dim,
                                         1.0 / np.sqrt(c.fusion_dim), dt, "key")
        self.queries = Parameter(
            (rng.standard_normal((c.n_semantic, c.key_dim))
             / np.sqrt(c.key_dim)).astype(dt), name="queries")
        self.color_w, self.color_b = _linear(rng, c.dim_w, c.n_semantic * 3,
                                             1.0 / np.sqrt(c.dim_w), dt, "color")
        self.color_b.value = np.full(c.n_semantic * 3, 0.5, dtype=dt)
        if c.color_identity_init:
            w = np.zeros((c.dim_w, c.n_semantic * 3), dtype=dt)
            k = min(c.dim_w, c.n_semantic * 3)
            w[:k, :k] = np.eye(k, dtype=dt)
            self.color_w.value = w
        if c.view_branch:
            self.view_w1, self.view_b1 = _linear(rng, 3, c.fusion_dim,
                                                 1.0 / np.sqrt(3.0), dt, "view1")
            self.view_w2, self.view_b2 = _linear(rng, c.fusion_dim, c.fusion_dim,
                                                 1.0 / np.sqrt(c.fusion_dim), dt, "view2")
        self.alpha = Parameter(np.asarray(1.0, dtype=dt), name="alpha")
        self.beta = Parameter(np.asarray(0.1, dtype=dt), name="beta")

    def parameters(self):
        named = self.named_parameters()
        return list(named.values())

    def named_parameters(self):
        out = {
            "map1.w": self.map_w1, "map1.b": self.map_b1,
            "map2.w": self.map_w2, "map2.b": self.map_b2,
            "dec1.w": self.dec_w1, "dec1.b": self.dec_b1,
            "dec2.w": self.dec_w2, "dec2.b": self.dec_b2,
            "sdf.w": self.sdf_w, "sdf.b": self.sdf_b,
            "fuse.w": self.fuse_w, "fuse.b": self.fuse_b,
            "key.w": self.key_w, "key.b": self.key_b,
            "queries": self.queries,
            "color.w": self.color_w, "color.b": self.color_b,
            "alpha": self.alpha, "beta": self.beta,
        }
        for name in WPLUS_LAYERS[:3]:
            out[f"{name}.w"] = self.plane_w[name]
            out[f"{name}.b"] = self.plane_b[name]
        if self.cfg.view_branch:
            out.update({"view1.w": self.view_w1, "view1.b": self.view_b1,
                        "view2.w": self.view_w2, "view2.b": self.view_b2})
        return out

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def mapping(self, z) -> LatentCode:
        """Prior z ~ N(0, I) -> latent w (deterministic given weights)."""
        z = as_tensor(np.asarray(z, dtype=self.cfg.np_dtype())
                      if not isinstance(z, Tensor) else z)
        if not np.all(np.isfinite(z.value)):
            raise ValueError("mapping input must be finite")
        h = ad.leaky_relu(_apply(ad.reshape(z, (1, -1)), self.map_w1, self.map_b1))
        w = _apply(h, self.map_w2, self.map_b2)
        return LatentCode(ad.reshape(w, (-1,)), mode="W")

    def decode_planes(self, code: LatentCode):
        """Latent -> three (C,R,R) feature planes (one linear layer each)."""
        c = self.cfg
        if code.dim != c.dim_w:
            raise ad.GraphError(
                f"latent dim {code.dim} does not match generator dim_w {c.dim_w}")
        planes = []
        for name in WPLUS_LAYERS[:3]:
            w = ad.reshape(code.layer(name), (1, -1))
            flat = _apply(w, self.plane_w[name], self.plane_b[name])
            planes.append(ad.reshape(
                flat, (c.plane_channels, c.plane_res, c.plane_res)))
        return planes

    def color_values(self, code: LatentCode):
        w = ad.reshape(code.layer("color"), (1, -1))
        v = _apply(w, self.color_w, self.color_b)
        return ad.reshape(v, (self.cfg.n_semantic, 3))

    def realize(self, code: LatentCode) -> "TriplaneField":
        return TriplaneField(self, self.decode_planes(code),
                             self.color_values(code))

    def view_embedding(self, view_dirs):
        h = ad.leaky_relu(_apply(view_dirs, self.view_w1, self.view_b1))
        return _apply(h, self.view_w2, self.view_b2)


class TriplaneField:
    """Realized field: planes + decoder + density params + color mapping.

    planes/values may be leaf parameters (standalone field) or graph tensors
    produced from a latent code (generator output under inversion).
    """

    def __init__(self, gen: FieldGenerator, planes, values):
        self.gen = gen
        self.cfg = gen.cfg
        self.planes = list(planes)
        self.values = values            # (S, 3)
        self.alpha = gen.alpha
        self.beta = gen.beta
        self.n_semantic = gen.cfg.n_semantic
        self.has_view_branch = gen.cfg.view_branch

    @staticmethod
    def standalone(cfg: FieldConfig = None, seed=0) -> "TriplaneField":
        """Field with its own plane/value parameters (no latent)."""
        gen = FieldGenerator(cfg, seed=seed)
        c = gen.cfg
        dt = c.np_dtype()
        rng = np.random.default_rng(seed + 1)
        planes = [Parameter((rng.standard_normal(
            (c.plane_channels, c.plane_res, c.plane_res)) * 0.1).astype(dt),
            name=f"plane{i}") for i in range(3)]
        values = Parameter(np.full((c.n_semantic, 3), 0.5, dtype=dt), name="values")
        return TriplaneField(gen, planes, values)

    def trainable_parameters(self):
        ps = [p for p in self.planes if isinstance(p, Parameter)]
        if isinstance(self.values, Parameter):
            ps.append(self.values)
        ps += [self.gen.dec_w1, self.gen.dec_b1, self.gen.dec_w2, self.gen.dec_b2,
               self.gen.sdf_w, self.gen.sdf_b, self.gen.fuse_w, self.gen.fuse_b,
               self.gen.key_w, self.gen.key_b, self.gen.queries]
        return ps

    def with_values(self, values):
        f = TriplaneField(self.gen, self.planes, as_tensor(values))
        return f

    def _uv(self, x):
        ux = ad.concatenate([x[:, 0:1], x[:, 1:2]], axis=1)   # xy plane
        uy = ad.concatenate([x[:, 0:1], x[:, 2:3]], axis=1)   # xz plane
        uz = ad.concatenate([x[:, 1:2], x[:, 2:3]], axis=1)   # yz plane
        return ux, uy, uz

    def features(self, x):
        """Summed bilinear plane features at x (N,3); clamps outside the cube."""
        uvs = self._uv(as_tensor(x))
        feat = ad.grid_sample(self.planes[0], uvs[0])
        for plane, uv in zip(self.planes[1:], uvs[1:]):
            feat = ad.add(feat, ad.grid_sample(plane, uv))
        return feat

    def _trunk(self, feat):
        g = self.gen
        pre1 = _apply(feat, g.dec_w1, g.dec_b1)
        h1 = ad.leaky_relu(pre1)
        pre2 = _apply(h1, g.dec_w2, g.dec_b2)
        h2 = ad.leaky_relu(pre2)
        return pre1, h1, pre2, h2

    def sdf(self, x):
        feat = self.features(x)
        _, _, _, h2 = self._trunk(feat)
        g = self.gen
        return ad.reshape(_apply(h2, g.sdf_w, g.sdf_b), (-1,))

    def query(self, x, view_dirs=None, need_color=True):
        """d, semantic key, softmax channel weights, and rgb at x (N,3)."""
        g = self.gen
        feat = self.features(x)
        _, _, _, h2 = self._trunk(feat)
        d = ad.reshape(_apply(h2, g.sdf_w, g.sdf_b), (-1,))
        if not need_color:
            return {"d": d}
        fused = _apply(h2, g.fuse_w, g.fuse_b)
        if view_dirs is not None and self.has_view_branch:
            fused = ad.add(fused, g.view_embedding(as_tensor(view_dirs)))
        key = _apply(ad.leaky_relu(fused), g.key_w, g.key_b)
        logits = ad.matmul(key, ad.transpose(self.gen.queries))
        sem = ad.softmax(logits, axis=1)
        rgb = ad.matmul(sem, as_tensor(self.values))
        return {"d": d, "key": key, "sem": sem, "rgb": rgb}

    def sdf_with_spatial_grad(self, x):
        """(d, grad_x d), both differentiable w.r.t. field parameters.

        The spatial gradient is the analytic derivative of the bilinear
        interpolation pushed through the decoder as a forward tangent, built
        out of tape ops, so one reverse pass gives second-order terms.
        """
        g = self.gen
        x = as_tensor(x)
        uvs = self._uv(x)
        feat = ad.grid_sample(self.planes[0], uvs[0])
        duv = [ad.grid_sample_duv(p, uv) for p, uv in zip(self.planes, uvs)]
        for plane, uv in zip(self.planes[1:], uvs[1:]):
            feat = ad.add(feat, ad.grid_sample(plane, uv))
        tx = ad.add(duv[0][:, :, 0], duv[1][:, :, 0])
        ty = ad.add(duv[0][:, :, 1], duv[2][:, :, 0])
        tz = ad.add(duv[1][:, :, 1], duv[2][:, :, 1])

        pre1, h1, pre2, h2 = self._trunk(feat)
        m1 = np.where(pre1.value > 0, 1.0, 0.2).astype(pre1.value.dtype)
        m2 = np.where(pre2.value > 0, 1.0, 0.2).astype(pre2.value.dtype)
        d = ad.reshape(_apply(h2, g.sdf_w, g.sdf_b), (-1,))

        cols = []
        for t in (tx, ty, tz):
            th1 = ad.mul(ad.matmul(t, g.dec_w1), m1)
            th2 = ad.mul(ad.matmul(th1, g.dec_w2), m2)
            cols.append(ad.matmul(th2, g.sdf_w))
        grad = ad.concatenate(cols, axis=1)
        return d, grad


def query_field(field: TriplaneField, x, view_dir=None):
    """Single/batch query returning (d, key, rgb) per the field contract."""
    x = np.atleast_2d(np.asarray(x, dtype=float)) if not isinstance(x, Tensor) else x
    out = field.query(as_tensor(x), view_dir)
    return out["d"], out["key"], out["rgb"]


def remap_colors(gen: FieldGenerator, code_identity: LatentCode,
                 code_color: LatentCode) -> TriplaneField:
    """Keys/geometry from one identity, color distribution from another."""
    field = gen.realize(code_identity)
    return field.with_values(gen.color_values(code_color))


def stratified_box_samples(n, rng, dtype=np.float64):
    """Latin-hypercube stratified samples over the [-1,1]^3 bounding volume."""
    out = np.empty((n, 3), dtype=dtype)
    for j in range(3):
        perm = rng.permutation(n)
        out[:, j] = ((perm + rng.random(n)) / n) * 2.0 - 1.0
    return out


def sphere_sdf_loss(field, x, radius=1.0):
    """Mean squared deviation from a centered-sphere SDF at samples x."""
    target = ad.constant((np.linalg.norm(x, axis=1) - radius).astype(x.dtype))
    d = field.sdf(ad.constant(x))
    return ad.mean(ad.power(ad.sub(d, target), 2))


def sdf_regression(target, target_sdf, iters, rng=None, lr=3e-3, batch=512,
                   code: LatentCode = None, log_every=0):
    """Regress the field SDF onto target_sdf(x) over stratified samples.

    `target` is a TriplaneField (trains planes + decoder) or a FieldGenerator
    (trains all generator weights; `code` fixes the latent). Raises
    PretrainDivergenceError if the loss grows 10x above its starting value.
    """
    rng = rng or np.random.default_rng(0)
    if isinstance(target, FieldGenerator):
        params = [p for p in target.parameters()
                  if p is not target.alpha and p is not target.beta]
        field_fn = lambda: target.realize(code)
        dtype = target.cfg.np_dtype()
    else:
        params = target.trainable_parameters()
        field_fn = lambda: target
        dtype = target.cfg.np_dtype()
    opt = Adam([{"params": params, "lr": lr}])
    first = None
    loss_val = None
    for i in range(iters):
        x = stratified_box_samples(batch, rng, dtype)
        ref = ad.constant(np.asarray(target_sdf(x), dtype=dtype))
        loss = ad.mean(ad.power(ad.sub(field_fn().sdf(ad.constant(x)), ref), 2))
        loss_val = float(loss.value)
        if first is None:
            first = loss_val
        if not np.isfinite(loss_val) or loss_val > 10.0 * max(first, 1e-6):
            raise PretrainDivergenceError(
                f"SDF pretraining diverged at iter {i}: {loss_val:.4g}")
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        if log_every and (i + 1) % log_every == 0:
            print(f"  pretrain iter {i+1}: loss {loss_val:.3e}")
    return target, loss_val


def sphere_pretrain(target, iters=1000, rng=None, lr=3e-3, batch=512,
                    code: LatentCode = None, log_every=0, radius=1.0):
    """Initialize the SDF to a unit sphere by direct regression."""
    def target_sdf(x):
        return np.linalg.norm(x, axis=1) - radius

    return sdf_regression(target, target_sdf, iters, rng=rng, lr=lr,
                          batch=batch, code=code, log_every=log_every)


def eikonal_loss(field, n_samples, rng=None):
    """E_x[(|grad d| - 1)^2] over stratified samples of the bounding volume.

    Differentiable w.r.t. the field parameters; fitting applies this with
    weight 0.1.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = rng or np.random.default_rng(0)
    dtype = field.cfg.np_dtype() if hasattr(field, "cfg") else np.float64
    x = stratified_box_samples(int(n_samples), rng, dtype)
    _, grad = field.sdf_with_spatial_grad(ad.constant(x))
    gn = ad.norm(grad, axis=1, eps=1e-12)
    return ad.mean(ad.power(ad.sub(gn, 1.0), 2))


class PathLengthState:
    """Running-mean target for the path length penalty."""

    def __init__(self, decay=0.99):
        self.decay = decay
        self.mean = 0.0

    def update(self, value):
        self.mean = self.decay * self.mean + (1.0 - self.decay) * float(value)
        return self.mean


def path_length_penalty(gen: FieldGenerator, code: LatentCode, rng,
                        state: PathLengthState = None):
    """StyleGAN2-style penalty on J = d(planes)/d(latent), decoder excluded.

    The plane decode is one linear layer per plane, so J^T y is formed
    exactly from the layer weights (and stays differentiable w.r.t. them);
    no nested tape is needed. Returns (penalty, |J^T y|).
    """
    c = gen.cfg
    pdim = c.plane_channels * c.plane_res * c.plane_res
    dt = c.np_dtype()
    scale = 1.0 / np.sqrt(3.0 * pdim)
    jtys = []
    for name in WPLUS_LAYERS[:3]:
        y = ad.constant((rng.standard_normal((pdim, 1)) * scale).astype(dt))
        jtys.append(ad.matmul(gen.plane_w[name], y))
    if code.mode == "W":
        jty = ad.add(ad.add(jtys[0], jtys[1]), jtys[2])
        length = ad.norm(ad.reshape(jty, (-1,)), axis=0, eps=1e-18)
    else:
        # block-diagonal Jacobian: one block per W+ layer
        stacked = ad.concatenate(jtys, axis=1)
        length = ad.norm(ad.reshape(stacked, (-1,)), axis=0, eps=1e-18)
    target = state.mean if state is not None else 0.0
    penalty = ad.power(ad.sub(length, target), 2)
    if state is not None:
        state.update(length.value)
    return penalty, length

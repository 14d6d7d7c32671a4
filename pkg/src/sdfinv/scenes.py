"""Procedural desk-scale scenes with exact SDFs, gradients, and colors.

These double as test oracles: every primitive exposes a closed-form signed
distance and unit gradient, so ground-truth depth, canonical maps, and
normals are available without any learned component. The renderer-facing
adapter builds the SDF out of tape ops, which keeps analytic-scene renders
differentiable w.r.t. the camera pose.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .geometry import PoseParams, look_at_pose


@dataclass
class Primitive:
    kind: str                  # sphere | box | capsule
    params: dict
    color: np.ndarray

    def sdf(self, x):
        """Exact SDF at x (N,3), numpy."""
        x = np.asarray(x, dtype=float)
        if self.kind == "sphere":
            c, r = self.params["center"], self.params["radius"]
            return np.linalg.norm(x - c, axis=-1) - r
        if self.kind == "box":
            c, h = self.params["center"], self.params["half_extents"]
            q = np.abs(x - c) - h
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        if self.kind == "capsule":
            a, b, r = self.params["a"], self.params["b"], self.params["radius"]
            pa, ba = x - a, b - a
            h = np.clip((pa @ ba) / (ba @ ba), 0.0, 1.0)
            return np.linalg.norm(pa - np.outer(h, ba), axis=-1) - r
        raise ValueError(f"unknown primitive kind {self.kind!r}")

    def sdf_grad(self, x):
        """Exact unit gradient of the SDF (numpy, defined a.e.)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "sphere":
            c = self.params["center"]
            v = x - c
            n = np.linalg.norm(v, axis=-1, keepdims=True)
            return v / np.maximum(n, 1e-12)
        if self.kind == "box":
            c, h = self.params["center"], self.params["half_extents"]
            p = x - c
            q = np.abs(p) - h
            g = np.zeros_like(p)
            out = q.max(axis=-1) > 0
            qpos = np.maximum(q, 0.0)
            n = np.linalg.norm(qpos, axis=-1, keepdims=True)
            g[out] = (qpos / np.maximum(n, 1e-12) * np.sign(p))[out]
            # inside: gradient along the axis closest to a face
            amax = q.argmax(axis=-1)
            inside = ~out
            rows = np.where(inside)[0]
            g[rows, amax[rows]] = np.sign(p[rows, amax[rows]])
            return g
        if self.kind == "capsule":
            a, b = self.params["a"], self.params["b"]
            pa, ba = x - a, b - a
            h = np.clip((pa @ ba) / (ba @ ba), 0.0, 1.0)
            v = pa - np.outer(h, ba)
            n = np.linalg.norm(v, axis=-1, keepdims=True)
            return v / np.maximum(n, 1e-12)
        raise ValueError(self.kind)

    def sdf_t(self, x):
        """SDF as tape ops of x (N,3) Tensor (for pose gradients)."""
        if self.kind == "sphere":
            c, r = self.params["center"], self.params["radius"]
            v = ad.sub(x, ad.constant(np.asarray(c, dtype=x.dtype)))
            return ad.sub(ad.norm(v, axis=1, eps=1e-18), r)
        if self.kind == "box":
            c, h = self.params["center"], self.params["half_extents"]
            p = ad.sub(x, ad.constant(np.asarray(c, dtype=x.dtype)))
            q = ad.sub(ad.absolute(p), ad.constant(np.asarray(h, dtype=x.dtype)))
            qpos = ad.maximum(q, 0.0)
            outside = ad.norm(qpos, axis=1, eps=1e-18)
            inside = ad.minimum(
                ad.maximum(ad.maximum(q[:, 0], q[:, 1]), q[:, 2]), 0.0)
            return ad.add(outside, inside)
        if self.kind == "capsule":
            a, b, r = self.params["a"], self.params["b"], self.params["radius"]
            ba = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
            pa = ad.sub(x, ad.constant(np.asarray(a, dtype=x.dtype)))
            proj = ad.mul(ad.sum_(ad.mul(pa, ad.constant(ba.astype(x.dtype))),
                                  axis=1, keepdims=True), 1.0 / float(ba @ ba))
            h = ad.clip(proj, 0.0, 1.0)
            v = ad.sub(pa, ad.mul(h, ad.constant(ba.astype(x.dtype))))
            return ad.sub(ad.norm(v, axis=1, eps=1e-18), r)
        raise ValueError(self.kind)


@dataclass
class PoseDistribution:
    azimuth: tuple = (0.0, 360.0)
    elevation: tuple = (-20.0, 50.0)
    distance: tuple = (2.3, 3.2)
    focal: tuple = (1.6, 3.0)
    t2_jitter: float = 0.03

    def sample(self, rng) -> PoseParams:
        az = rng.uniform(*self.azimuth)
        el = rng.uniform(*self.elevation)
        dist = rng.uniform(*self.distance)
        f = rng.uniform(*self.focal)
        t2 = rng.uniform(-self.t2_jitter, self.t2_jitter, size=2)
        return look_at_pose(az, el, dist, focal=f, t2=t2)


@dataclass
class SceneSpec:
    """Composition of primitives (union or intersection) + pose distribution."""
    primitives: list
    op: str = "union"                      # union | intersection
    poses: PoseDistribution = dc_field(default_factory=PoseDistribution)
    name: str = "scene"

    def sdf(self, x):
        d = np.stack([p.sdf(x) for p in self.primitives], axis=0)
        return d.min(axis=0) if self.op == "union" else d.max(axis=0)

    def owner(self, x):
        d = np.stack([p.sdf(x) for p in self.primitives], axis=0)
        return d.argmin(axis=0) if self.op == "union" else d.argmax(axis=0)

    def sdf_grad(self, x):
        own = self.owner(x)
        grads = np.stack([p.sdf_grad(x) for p in self.primitives], axis=0)
        return grads[own, np.arange(len(own))]

    def color(self, x):
        own = self.owner(x)
        cols = np.stack([p.color for p in self.primitives], axis=0)
        return cols[own]

    def sample_pose(self, rng) -> PoseParams:
        return self.poses.sample(rng)


class AnalyticSceneField:
    """Renderer-facing adapter: exact scene as a (non-learned) field.

    SDF values are built from tape ops of the query positions, so rendering
    stays differentiable w.r.t. pose; colors/semantics are piecewise constant
    (ownership detached, exact a.e.).
    """

    def __init__(self, scene: SceneSpec, alpha=0.01, beta=0.01):
        self.scene = scene
        self.alpha = alpha
        self.beta = beta
        self.n_semantic = len(scene.primitives)
        self.has_view_branch = False

    def query(self, x, view_dirs=None, need_color=True):
        xv = x.value if isinstance(x, ad.Tensor) else np.asarray(x)
        xt = ad.as_tensor(x)
        ds = [p.sdf_t(xt) for p in self.scene.primitives]
        d = ds[0]
        for other in ds[1:]:
            d = ad.minimum(d, other) if self.scene.op == "union" \
                else ad.maximum(d, other)
        own = self.scene.owner(xv)
        onehot = np.eye(self.n_semantic, dtype=xv.dtype)[own]
        cols = np.stack([p.color for p in self.scene.primitives], axis=0)
        rgb = ad.constant((onehot @ cols).astype(xv.dtype))
        sem = ad.constant(onehot)
        return {"d": d, "rgb": rgb, "sem": sem}

    def sdf_with_spatial_grad(self, x):
        xv = x.value if isinstance(x, ad.Tensor) else np.asarray(x)
        d = self.scene.sdf(xv)
        g = self.scene.sdf_grad(xv)
        return ad.constant(d), ad.constant(g)


class ScaledField:
    """d -> scale * d wrapper (e.g. to break the eikonal property on purpose)."""

    def __init__(self, inner, scale):
        self.inner = inner
        self.scale = scale

    def sdf_with_spatial_grad(self, x):
        d, g = self.inner.sdf_with_spatial_grad(x)
        return ad.mul(d, self.scale), ad.mul(g, self.scale)


def sphere_scene(radius=0.6, color=(0.9, 0.3, 0.2), center=(0, 0, 0),
                 name="sphere") -> SceneSpec:
    prim = Primitive("sphere", {"center": np.asarray(center, float),
                                "radius": float(radius)},
                     np.asarray(color, float))
    return SceneSpec([prim], name=name)


def unit_sphere_scene() -> SceneSpec:
    # unit sphere needs a farther, narrower camera to fit the view
    spec = sphere_scene(radius=1.0, name="unit_sphere")
    spec.poses = PoseDistribution(distance=(4.0, 4.5), focal=(1.4, 1.6),
                                  t2_jitter=0.0)
    return spec


def two_spheres_scene() -> SceneSpec:
    prims = [
        Primitive("sphere", {"center": np.array([-0.3, 0.0, 0.0]),
                             "radius": 0.42}, np.array([0.85, 0.25, 0.2])),
        Primitive("sphere", {"center": np.array([0.35, 0.1, 0.05]),
                             "radius": 0.3}, np.array([0.2, 0.4, 0.85])),
    ]
    return SceneSpec(prims, name="two_spheres")


def box_capsule_scene() -> SceneSpec:
    prims = [
        Primitive("box", {"center": np.array([0.0, -0.18, 0.0]),
                          "half_extents": np.array([0.42, 0.16, 0.3])},
                  np.array([0.25, 0.7, 0.3])),
        Primitive("capsule", {"a": np.array([-0.25, 0.1, 0.0]),
                              "b": np.array([0.25, 0.32, 0.0]),
                              "radius": 0.14}, np.array([0.9, 0.75, 0.2])),
    ]
    return SceneSpec(prims, name="box_capsule")


_BUILTINS = {
    "sphere": sphere_scene,
    "unit_sphere": unit_sphere_scene,
    "two_spheres": two_spheres_scene,
    "box_capsule": box_capsule_scene,
}


def random_scene(seed) -> SceneSpec:
    """2-4 random primitives with random sizes/colors inside the cube."""
    rng = np.random.default_rng(int(seed))
    n = int(rng.integers(2, 5))
    prims = []
    for _ in range(n):
        kind = ["sphere", "box", "capsule"][int(rng.integers(0, 3))]
        color = rng.uniform(0.1, 0.95, size=3)
        center = rng.uniform(-0.28, 0.28, size=3)
        if kind == "sphere":
            prims.append(Primitive("sphere", {
                "center": center, "radius": float(rng.uniform(0.15, 0.33))}, color))
        elif kind == "box":
            prims.append(Primitive("box", {
                "center": center,
                "half_extents": rng.uniform(0.1, 0.27, size=3)}, color))
        else:
            a = center
            b = center + rng.uniform(-0.4, 0.4, size=3)
            prims.append(Primitive("capsule", {
                "a": a, "b": np.clip(b, -0.55, 0.55),
                "radius": float(rng.uniform(0.07, 0.17))}, color))
    poses = PoseDistribution(distance=(2.6, 3.4), focal=(1.6, 2.2))
    return SceneSpec(prims, poses=poses, name=f"random_{seed}")


def get_scene(name) -> SceneSpec:
    """Builtin name or 'random:<seed>'."""
    if name in _BUILTINS:
        return _BUILTINS[name]()
    if name.startswith("random:"):
        return random_scene(int(name.split(":", 1)[1]))
    raise KeyError(f"unknown scene {name!r}")

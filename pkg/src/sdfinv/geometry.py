"""Pose parameterization, quaternion algebra, cameras, and ray generation.

Conventions:
  * world-to-camera: x_cam = R(q) @ x_world + t3, camera looks along +z.
  * normalized image plane spans [-0.5, 0.5]^2 (u right, v down), focal in
    the same units; a pixel grid of any resolution maps into this square.
  * quaternions are (w, x, y, z), canonicalized to w >= 0 for round trips.
  * pose is (q, s, t2, z0): unit quaternion, screen scale s > 0, screen
    translation, and log-perspective factor. Derived quantities are
    f = 1 + exp(z0) and t3 = [t2/s ; f/s]; full-perspective projection is
    u = f * x_cam / z_cam.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor


class InvalidPoseError(ValueError):
    pass


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x)


class PoseParams:
    """(q, s, t2, z0); fields may be numpy arrays or tape tensors."""

    def __init__(self, q, s, t2, z0):
        self.q = q
        self.s = s
        self.t2 = t2
        self.z0 = z0

    def numpy(self):
        return PoseParams(
            _val(self.q).astype(float).copy(), float(_val(self.s)),
            _val(self.t2).astype(float).copy(), float(_val(self.z0)))

    def parameters(self):
        """Fresh optimizable leaves initialized from this pose."""
        return PoseParams(
            ad.Parameter(_val(self.q).astype(float), "pose.q"),
            ad.Parameter(float(_val(self.s)), "pose.s"),
            ad.Parameter(_val(self.t2).astype(float), "pose.t2"),
            ad.Parameter(float(_val(self.z0)), "pose.z0"))

    def param_list(self):
        return [self.q, self.s, self.t2, self.z0]

    def to_vector(self):
        """Serialize as 8 reals (q, s, t2, z0) for scene/config files."""
        p = self.numpy()
        return np.concatenate([p.q, [p.s], p.t2, [p.z0]])

    @staticmethod
    def from_vector(v):
        v = np.asarray(v, dtype=float)
        if v.shape != (8,):
            raise ValueError("pose vector must have 8 entries (q, s, t2, z0)")
        return PoseParams(v[:4].copy(), float(v[4]), v[5:7].copy(), float(v[7]))

    def focal(self):
        return 1.0 + np.exp(float(_val(self.z0)))

    def copy(self):
        return self.numpy()

    def __repr__(self):
        p = self.numpy()
        return (f"PoseParams(q={np.round(p.q, 4)}, s={p.s:.4f}, "
                f"t2={np.round(p.t2, 4)}, z0={p.z0:.4f})")


@dataclass
class Camera:
    view: object          # (4,4) world-to-camera, Tensor or ndarray
    focal: object         # scalar, Tensor or ndarray
    projection_mode: str = "full-perspective"
    # kept so weak-perspective ray generation has the screen parameters
    s: object = None
    t2: object = None

    def view_numpy(self):
        return _val(self.view).astype(float)

    def focal_numpy(self):
        return float(_val(self.focal))


@dataclass
class RayBundle:
    """Flat bundle of per-pixel rays; origins/dirs are (N,3)."""
    origins: object
    dirs: object
    t_near: object        # (N,)
    t_far: object         # (N,)
    hit: np.ndarray       # (N,) bool, ray intersects the bounding cube
    width: int = 0
    height: int = 0


def quaternion_normalize(q):
    q = as_tensor(q)
    n = ad.norm(q, axis=-1, keepdims=True)
    return ad.div(q, n)


def quaternion_to_matrix(q):
    """Unit-normalized (w,x,y,z) quaternion -> 3x3 rotation, differentiable."""
    q = quaternion_normalize(q)
    w, x, y, z = q[0], q[1], q[2], q[3]
    two = 2.0
    r00 = 1 - two * (y * y + z * z)
    r01 = two * (x * y - w * z)
    r02 = two * (x * z + w * y)
    r10 = two * (x * y + w * z)
    r11 = 1 - two * (x * x + z * z)
    r12 = two * (y * z - w * x)
    r20 = two * (x * z - w * y)
    r21 = two * (y * z + w * x)
    r22 = 1 - two * (x * x + y * y)
    rows = [ad.stack([r00, r01, r02]), ad.stack([r10, r11, r12]),
            ad.stack([r20, r21, r22])]
    return ad.stack(rows, axis=0)


def matrix_to_quaternion(R):
    """3x3 rotation -> (w,x,y,z) with w >= 0 (Shepperd's method, numpy)."""
    R = _val(R)
    t = np.trace(R)
    if t > 0:
        r = np.sqrt(1.0 + t)
        w = 0.5 * r
        x = (R[2, 1] - R[1, 2]) / (2 * r)
        y = (R[0, 2] - R[2, 0]) / (2 * r)
        z = (R[1, 0] - R[0, 1]) / (2 * r)
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        vec = np.empty(3)
        vec[i] = 0.5 * r
        vec[j] = (R[j, i] + R[i, j]) / (2 * r)
        vec[k] = (R[k, i] + R[i, k]) / (2 * r)
        w = (R[k, j] - R[j, k]) / (2 * r)
        x, y, z = vec
    q = np.array([w, x, y, z])
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def quaternion_multiply(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def axis_angle_quaternion(axis, angle_rad):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle_rad
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def perturb_quaternion(q, angle_deg, rng):
    """Rotate q by exactly angle_deg about a random axis."""
    axis = rng.standard_normal(3)
    dq = axis_angle_quaternion(axis, np.deg2rad(angle_deg))
    out = quaternion_multiply(dq, np.asarray(q, dtype=float))
    return out / np.linalg.norm(out)


def rotation_error(q_pred, q_gt):
    """Geodesic rotation distance in degrees, double-cover aware."""
    q1 = np.asarray(_val(q_pred), dtype=float)
    q2 = np.asarray(_val(q_gt), dtype=float)
    n1, n2 = np.linalg.norm(q1), np.linalg.norm(q2)
    if abs(n1 - 1) > 1e-6 or abs(n2 - 1) > 1e-6:
        warnings.warn("rotation_error: non-unit quaternion input, normalizing")
    d = abs(np.dot(q1 / n1, q2 / n2))
    return float(np.degrees(2.0 * np.arccos(min(d, 1.0))))


def pose_to_camera(p: PoseParams) -> Camera:
    """Differentiable (q,s,t2,z0) -> world-to-camera matrix + focal."""
    s_val = float(_val(p.s))
    if s_val <= 0:
        raise InvalidPoseError(f"screen scale must be positive, got {s_val}")
    q, s, t2, z0 = (as_tensor(p.q), as_tensor(p.s), as_tensor(p.t2),
                    as_tensor(p.z0))
    R = quaternion_to_matrix(q)
    f = ad.add(1.0, ad.exp(z0))
    t3 = ad.concatenate([ad.div(t2, s), ad.reshape(ad.div(f, s), (1,))])
    top = ad.concatenate([R, ad.reshape(t3, (3, 1))], axis=1)
    bottom = ad.constant(np.array([[0.0, 0.0, 0.0, 1.0]], dtype=top.value.dtype))
    view = ad.concatenate([top, bottom], axis=0)
    return Camera(view=view, focal=f, projection_mode="full-perspective",
                  s=s, t2=t2)


def camera_to_pose(cam: Camera) -> PoseParams:
    """Inverse of pose_to_camera (numpy; q canonicalized to w >= 0)."""
    view = cam.view_numpy()
    f = cam.focal_numpy()
    if f <= 1.0:
        raise InvalidPoseError("focal must exceed 1 in this parameterization")
    R = view[:3, :3]
    t3 = view[:3, 3]
    if t3[2] <= 0:
        raise InvalidPoseError("camera must be in front of the scene (t_z > 0)")
    q = matrix_to_quaternion(R)
    s = f / t3[2]
    t2 = t3[:2] * s
    z0 = float(np.log(f - 1.0))
    return PoseParams(q, float(s), t2, z0)


def pixel_grid(width, height, dtype=np.float64):
    """Pixel-center coordinates in the normalized [-0.5, 0.5]^2 plane."""
    u = (np.arange(width, dtype=dtype) + 0.5) / width - 0.5
    v = (np.arange(height, dtype=dtype) + 0.5) / height - 0.5
    uu, vv = np.meshgrid(u, v)
    return uu.ravel(), vv.ravel()


def _safe_dirs(d, eps=1e-9):
    v = d.value
    small = np.abs(v) < eps
    if not small.any():
        return d
    repl = np.where(v < 0, -eps, eps)
    return ad.where(small, ad.constant(repl.astype(v.dtype)), d)


def ray_cube_intersect(origins, dirs, half_extent=1.0):
    """Slab intersection with [-h, h]^3. Returns (t_near, t_far, hit)."""
    origins, dirs = as_tensor(origins), as_tensor(dirs)
    d = _safe_dirs(dirs)
    inv = ad.div(1.0, d)
    lo = ad.mul(ad.sub(-half_extent, origins), inv)
    hi = ad.mul(ad.sub(half_extent, origins), inv)
    tmin = ad.minimum(lo, hi)
    tmax = ad.maximum(lo, hi)
    t0 = ad.maximum(ad.maximum(tmin[:, 0], tmin[:, 1]), tmin[:, 2])
    t1 = ad.minimum(ad.minimum(tmax[:, 0], tmax[:, 1]), tmax[:, 2])
    t0 = ad.maximum(t0, 0.0)
    hit = (t1.value > t0.value)
    return t0, t1, hit


def generate_rays(cam: Camera, width, height, dtype=np.float64) -> RayBundle:
    """Per-pixel rays in world space, differentiable w.r.t. the pose.

    Full perspective: pinhole directions through the focal plane. Weak
    perspective: parallel rays along the camera axis, screen scaled by s.
    Per-pixel view directions are constant along depth in both modes.
    """
    if width < 1 or height < 1:
        raise ValueError("image must be at least 1x1")
    view = as_tensor(cam.view)
    R = view[:3, :3]
    t3 = view[:3, 3]
    u, v = pixel_grid(width, height, dtype)
    n = u.size
    if cam.projection_mode == "full-perspective":
        f = as_tensor(cam.focal)
        uv1 = ad.constant(np.stack([u, v], axis=1))
        fcol = ad.reshape(f, (1, 1)) * ad.constant(np.ones((n, 1), dtype=dtype))
        dirs_cam = ad.concatenate([uv1, fcol], axis=1)
        dirs_cam = ad.div(dirs_cam, ad.norm(dirs_cam, axis=1, keepdims=True))
        dirs = ad.matmul(dirs_cam, R)                      # rows: R^T d
        origin = ad.mul(ad.matmul(ad.reshape(t3, (1, 3)), R), -1.0)
        origins = ad.mul(origin, ad.constant(np.ones((n, 1), dtype=dtype)))
    elif cam.projection_mode == "weak-perspective":
        s = as_tensor(cam.s if cam.s is not None else 1.0)
        t2 = as_tensor(cam.t2 if cam.t2 is not None else np.zeros(2))
        uv = ad.constant(np.stack([u, v], axis=1))
        xy_cam = ad.div(ad.sub(uv, ad.reshape(t2, (1, 2))), s)
        # start rays behind the scene; the unit cube is always inside z > -2
        zcol = ad.constant(np.full((n, 1), -2.0, dtype=dtype))
        p_cam = ad.concatenate([xy_cam, zcol], axis=1)
        origins = ad.matmul(p_cam, R)
        fwd = ad.reshape(R[2, :], (1, 3))
        dirs = ad.mul(fwd, ad.constant(np.ones((n, 1), dtype=dtype)))
    else:
        raise ValueError(f"unknown projection mode {cam.projection_mode!r}")
    t_near, t_far, hit = ray_cube_intersect(origins, dirs)
    return RayBundle(origins=origins, dirs=dirs, t_near=t_near, t_far=t_far,
                     hit=hit, width=width, height=height)


def look_at_pose(azimuth_deg, elevation_deg, distance, focal=2.0,
                 t2=(0.0, 0.0)) -> PoseParams:
    """Camera on a sphere of `distance`, looking at the origin (y up)."""
    if focal <= 1.0:
        raise InvalidPoseError("focal must exceed 1")
    az, el = np.deg2rad(azimuth_deg), np.deg2rad(elevation_deg)
    pos = distance * np.array([np.cos(el) * np.sin(az), np.sin(el),
                               np.cos(el) * np.cos(az)])
    fwd = -pos / np.linalg.norm(pos)
    up = np.array([0.0, 1.0, 0.0])
    if abs(np.dot(up, fwd)) > 0.999:
        up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    q = matrix_to_quaternion(R)
    s = focal / distance
    t2 = np.asarray(t2, dtype=float)
    z0 = float(np.log(focal - 1.0))
    return PoseParams(q, float(s), t2, z0)


def project_points(points, pose: PoseParams):
    """World points (N,3) -> normalized pixel coords (N,2) (numpy)."""
    p = pose.numpy()
    R = _val(quaternion_to_matrix(ad.constant(p.q)))
    f = 1.0 + np.exp(p.z0)
    t3 = np.concatenate([p.t2 / p.s, [f / p.s]])
    cam = points @ R.T + t3
    return f * cam[:, :2] / cam[:, 2:3], cam[:, 2]

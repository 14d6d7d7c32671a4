"""Pose recovery from canonical (NOCS-style) maps: DLT + Gauss-Newton PnP
with a focal-length sweep, plus the bootstrap data loop and a least-squares
latent regressor standing in for a learned encoder.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import imgio
from .geometry import (InvalidPoseError, PoseParams, matrix_to_quaternion,
                       pixel_grid, quaternion_to_matrix)
from .renderer import RenderConfig, render_image


class InsufficientDataError(ValueError):
    pass


class DegenerateConfigurationError(RuntimeError):
    pass


@dataclass
class CanonicalObservation:
    pixels: np.ndarray        # (N, 2) normalized image coords
    points: np.ndarray        # (N, 3) canonical coords
    mask_threshold: float

    def __len__(self):
        return len(self.pixels)


@dataclass
class PnPSolution:
    pose: PoseParams
    reprojection_error: float  # mean distance in normalized image units
    focal: float
    converged: bool = True


def extract_observation(out, mask_threshold=0.5) -> CanonicalObservation:
    """Pair every pixel above the mask threshold with its canonical point.

    The rendered canonical channel is mask-weighted (integrated x,y,z), so it
    is renormalized by the alpha mask to estimate the surface point.
    """
    mask = out.mask.value if hasattr(out.mask, "value") else np.asarray(out.mask)
    canon = (out.canonical.value if hasattr(out.canonical, "value")
             else np.asarray(out.canonical))
    h, w = mask.shape
    keep = mask > mask_threshold
    if keep.sum() < 6:
        raise InsufficientDataError(
            f"only {int(keep.sum())} pixels above mask threshold "
            f"{mask_threshold} (need >= 6)")
    u, v = pixel_grid(w, h)
    pixels = np.stack([u.reshape(h, w)[keep], v.reshape(h, w)[keep]], axis=1)
    points = canon[keep] / mask[keep][:, None]
    return CanonicalObservation(pixels=pixels, points=points,
                                mask_threshold=mask_threshold)


def _project(R, t, f, X):
    cam = X @ R.T + t
    return f * cam[:, :2] / cam[:, 2:3], cam[:, 2]


def _reprojection(R, t, f, obs):
    px, _ = _project(R, t, f, obs.points)
    return float(np.mean(np.linalg.norm(px - obs.pixels, axis=1)))


def _dlt(obs, focal):
    X = np.concatenate([obs.points, np.ones((len(obs), 1))], axis=1)
    uv = obs.pixels / focal
    n = len(obs)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = X
    A[0::2, 8:12] = -uv[:, 0:1] * X
    A[1::2, 4:8] = X
    A[1::2, 8:12] = -uv[:, 1:2] * X
    _, s, vt = np.linalg.svd(A, full_matrices=False)
    if s[-2] < 1e-8 * max(s[0], 1e-12):
        raise DegenerateConfigurationError(
            "rank-deficient correspondences (degenerate configuration)")
    P = vt[-1].reshape(3, 4)
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = P[:, :3]
    u, sv, vtm = np.linalg.svd(M)
    scale = sv.mean()
    R = u @ vtm
    t = P[:, 3] / scale
    # cheirality: the scene must sit in front of the camera
    z = obs.points @ R[2] + t[2]
    if np.median(z) < 0:
        raise DegenerateConfigurationError("DLT solution behind the camera")
    return R, t


def _gauss_newton(R, t, focal, obs, iters=25):
    X = obs.points
    target = obs.pixels
    lam = 1e-10
    converged = False
    for _ in range(iters):
        cam = X @ R.T + t
        z = cam[:, 2]
        px = focal * cam[:, :2] / z[:, None]
        r = (px - target).ravel()
        # d(pixel)/d(cam): rows [f/z, 0, -f x / z^2], [0, f/z, -f y / z^2]
        n = len(X)
        dpdc = np.zeros((n, 2, 3))
        dpdc[:, 0, 0] = focal / z
        dpdc[:, 0, 2] = -focal * cam[:, 0] / z ** 2
        dpdc[:, 1, 1] = focal / z
        dpdc[:, 1, 2] = -focal * cam[:, 1] / z ** 2
        # cam = R exp([w]x) X + t: d(cam)/dw = -R [X]x, d(cam)/dt = I
        Xx = np.zeros((n, 3, 3))
        Xx[:, 0, 1] = -X[:, 2]
        Xx[:, 0, 2] = X[:, 1]
        Xx[:, 1, 0] = X[:, 2]
        Xx[:, 1, 2] = -X[:, 0]
        Xx[:, 2, 0] = -X[:, 1]
        Xx[:, 2, 1] = X[:, 0]
        dcdw = -np.einsum("ij,njk->nik", R, Xx)
        J = np.concatenate([
            np.einsum("nij,njk->nik", dpdc, dcdw),
            dpdc,
        ], axis=2).reshape(2 * n, 6)
        g = J.T @ r
        H = J.T @ J
        try:
            step = np.linalg.solve(H + lam * np.eye(6), -g)
        except np.linalg.LinAlgError:
            lam *= 100
            continue
        w = step[:3]
        angle = np.linalg.norm(w)
        if angle > 1e-300:
            k = w / angle
            K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
            dR = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
        else:
            dR = np.eye(3)
        R = R @ dR
        t = t + step[3:]
        if np.linalg.norm(step) < 1e-12:
            converged = True
            break
    return R, t, converged


def _to_pose(R, t, focal) -> PoseParams:
    if t[2] <= 0:
        raise InvalidPoseError("recovered camera is behind the scene")
    q = matrix_to_quaternion(R)
    s = focal / t[2]
    t2 = t[:2] * s
    z0 = float(np.log(max(focal - 1.0, 1e-12)))
    return PoseParams(q, float(s), t2, z0)


def solve_pnp(obs: CanonicalObservation, focal, restarts=4, rng=None
              ) -> PnPSolution:
    """Minimize mean squared reprojection over (R, t) at a fixed focal.

    DLT initialization refined by Gauss-Newton; a few randomized restarts
    approximate global behavior. Raises DegenerateConfigurationError on
    rank-deficient correspondences; if no restart converges the best iterate
    is returned with converged=False.
    """
    if len(obs) < 6:
        raise InsufficientDataError(f"{len(obs)} correspondences (need >= 6)")
    if focal <= 1.0:
        raise InvalidPoseError("focal must exceed 1 in this parameterization")
    rng = rng or np.random.default_rng(0)
    R0, t0 = _dlt(obs, focal)
    best = None
    for k in range(max(1, restarts)):
        if k == 0:
            R, t = R0, t0
        else:
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            ang = rng.uniform(0.05, 0.5)
            K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]],
                          [-axis[1], axis[0], 0]])
            dR = (np.eye(3) + np.sin(ang) * K + (1 - np.cos(ang)) * (K @ K))
            R, t = R0 @ dR, t0
        R, t, conv = _gauss_newton(R, t, focal, obs)
        try:
            pose = _to_pose(R, t, focal)
        except InvalidPoseError:
            continue
        err = _reprojection(R, t, focal, obs)
        if best is None or err < best.reprojection_error:
            best = PnPSolution(pose=pose, reprojection_error=err,
                               focal=float(focal), converged=conv)
        if best.reprojection_error < 1e-10 and best.converged:
            break
    if best is None:
        raise DegenerateConfigurationError("all PnP restarts failed")
    return best


def solve_pnp_focal_sweep(obs: CanonicalObservation, focal_candidates,
                          rng=None) -> PnPSolution:
    """Run solve_pnp per focal candidate, keep the lowest reprojection."""
    focal_candidates = list(focal_candidates)
    if sorted(focal_candidates) != focal_candidates:
        raise ValueError("focal candidates must be sorted ascending")
    best = None
    errors = []
    for f in focal_candidates:
        try:
            sol = solve_pnp(obs, f, rng=rng)
        except (DegenerateConfigurationError, InvalidPoseError) as e:
            errors.append(f"f={f}: {e}")
            continue
        if best is None or sol.reprojection_error < best.reprojection_error:
            best = sol
    if best is None:
        raise DegenerateConfigurationError(
            "all focal candidates degenerate: " + "; ".join(errors))
    return best


def default_focal_candidates(pose_dist, n=10):
    """Representative focals: one per n-th percentile of the distribution."""
    lo, hi = pose_dist.focal
    qs = (np.arange(n) + 0.5) / n
    return list(lo + (hi - lo) * qs)


def generate_bootstrap_dataset(gen, n_scenes, pose_sampler, out_dir,
                               width=64, height=64, seed=0,
                               render_cfg: RenderConfig = None):
    """Sample z ~ N(0,I), render rgb/canonical/mask from random viewpoints,
    and write one scene directory per record."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    cfg = render_cfg or RenderConfig(seed=seed)
    records = []
    for i in range(int(n_scenes)):
        z = rng.standard_normal(gen.cfg.dim_z)
        code = gen.mapping(z)
        field = gen.realize(code)
        pose = pose_sampler(rng)
        out = render_image(field, _pose_cam(pose), cfg, width, height)
        sdir = out_dir / f"scene_{i:04d}"
        sdir.mkdir(exist_ok=True)
        imgio.write_ppm(sdir / "rgb.ppm", out.rgb)
        imgio.write_pgm16(sdir / "mask.pgm", out.mask)
        imgio.write_raw(sdir / "canonical.raw", out.canonical)
        imgio.write_meta(sdir / "meta", {
            "w": code.numpy().astype(float),
            "z": z,
            "pose": pose.to_vector(),
            "width": width, "height": height,
        })
        records.append(sdir)
    imgio.write_meta(out_dir / "manifest", {
        "n_scenes": int(n_scenes), "seed": int(seed),
        "width": width, "height": height,
    })
    return records


def _pose_cam(pose):
    from .geometry import pose_to_camera
    return pose_to_camera(pose)


def load_dataset(dataset_dir):
    """Read back records written by generate_bootstrap_dataset."""
    dataset_dir = Path(dataset_dir)
    records = []
    for sdir in sorted(dataset_dir.glob("scene_*")):
        meta = imgio.read_meta(sdir / "meta")
        records.append({
            "rgb": imgio.read_ppm(sdir / "rgb.ppm"),
            "mask": imgio.read_pgm16(sdir / "mask.pgm"),
            "canonical": imgio.read_raw(sdir / "canonical.raw"),
            "w": np.asarray(meta["w"]),
            "pose": PoseParams.from_vector(meta["pose"]),
        })
    return records


def _block_mean(img, out_side):
    h, w = img.shape[:2]
    fh, fw = h // out_side, w // out_side
    img = img[:fh * out_side, :fw * out_side]
    img = img.reshape(out_side, fh, out_side, fw, -1)
    return img.mean(axis=(1, 3))


def _features(rgb, mask, side=8):
    f_rgb = _block_mean(np.asarray(rgb), side).ravel()
    f_mask = _block_mean(np.asarray(mask)[:, :, None], side).ravel()
    return np.concatenate([f_rgb, f_mask, [1.0]])


class LatentRegressor:
    """Ridge regression from coarse image features to the latent code."""

    def __init__(self, weights, side):
        self.weights = weights
        self.side = side

    def predict(self, rgb, mask):
        return _features(rgb, mask, self.side) @ self.weights

    def mse(self, records):
        errs = [np.mean((self.predict(r["rgb"], r["mask"]) - r["w"]) ** 2)
                for r in records]
        return float(np.mean(errs))


def fit_latent_regressor(records, side=8, ridge=1e-6):
    """Least-squares latent head; returns (regressor, training MSE)."""
    if not records:
        raise InsufficientDataError("empty dataset")
    X = np.stack([_features(r["rgb"], r["mask"], side) for r in records])
    Y = np.stack([r["w"] for r in records])
    f = X.shape[1]
    lam = ridge * max(np.trace(X.T @ X) / f, 1e-12)
    W = np.linalg.solve(X.T @ X + lam * np.eye(f), X.T @ Y)
    reg = LatentRegressor(W, side)
    return reg, reg.mse(records)


def masked_map_loss(pred_map, gt_map, gt_mask):
    """Mean over pixels of mask-weighted Euclidean map error.

    Evaluation metric for canonical-map predictors (rotation-invariant,
    square-root form of the per-pixel L2).
    """
    pred_map = np.asarray(pred_map)
    gt_map = np.asarray(gt_map)
    m = np.asarray(gt_mask)
    dist = np.linalg.norm(pred_map - gt_map, axis=-1)
    return float(np.mean(m * dist))


def mask_l1_loss(pred_mask, gt_mask):
    return float(np.mean(np.abs(np.asarray(pred_mask) - np.asarray(gt_mask))))


def latent_l2_loss(pred_w, gt_w):
    return float(np.sum((np.asarray(pred_w) - np.asarray(gt_w)) ** 2))

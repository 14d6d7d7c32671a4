"""Hybrid inversion: bootstrap an initial (latent, pose), then jointly refine
both with Adam against an augmentation-averaged image distance.

The image distance is pluggable; the default is an L1 over a 3-level
downsampling pyramid, which keeps coarse-scale gradient signal for the pose
while staying dependency-free. Augmentations are geometric only and identical
for prediction and target within each of the K draws.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import backend
from .geometry import PoseParams, perturb_quaternion, pose_to_camera, rotation_error
from .metrics import psnr
from .optim import Adam, clamp_min_, renormalize_
from .pose_estimation import extract_observation, solve_pnp_focal_sweep
from .renderer import RenderConfig, render, render_image
from .scene_field import WPLUS_LAYERS, LatentCode


class InversionDivergence(RuntimeError):
    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


@dataclass
class InversionConfig:
    n_steps: int = 30
    base_lr: float = 0.02
    latent_gain: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.95
    n_augment: int = 16
    latent_mode: str = "W_plus"
    schedule: str = "constant"
    seed: int = 0
    width: int = 64
    height: int = 64
    n_coarse: int = 32
    n_fine: int = 32
    stratified: bool = False       # deterministic renders by default
    aug_scale: tuple = (0.8, 1.2)
    aug_translate: float = 0.1     # fraction of the image side
    aug_rotate_deg: float = 10.0
    optimize_pose: bool = True
    optimize_latent: bool = True
    # weight of the alpha-mask channel in the reconstruction distance
    # (inputs are pre-segmented, so their mask is available; it gives the
    # pose a color-independent alignment signal)
    mask_weight: float = 0.5
    trace_heldout: bool = False

    def __post_init__(self):
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if self.latent_gain < 1.0:
            raise ValueError("latent_gain must be >= 1")

    def render_config(self):
        return RenderConfig(n_coarse=self.n_coarse, n_fine=self.n_fine,
                            stratified=self.stratified, seed=self.seed)


@dataclass
class InversionState:
    latent: LatentCode
    pose: PoseParams
    moments: dict
    step: int
    loss_trace: list = dc_field(default_factory=list)
    psnr_trace: list = dc_field(default_factory=list)
    rot_trace: list = dc_field(default_factory=list)
    heldout_trace: list = dc_field(default_factory=list)


def _warp_params(seed, k, scale_rng, translate, rotate_deg):
    rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, k])
    sc = rng.uniform(*scale_rng)
    # translation is a fraction of the side; uv spans 2 units
    tx, ty = rng.uniform(-translate, translate, size=2) * 2.0
    th = np.deg2rad(rng.uniform(-rotate_deg, rotate_deg))
    return sc, tx, ty, th


def _base_grid(h, w, dtype):
    u = np.linspace(-1.0, 1.0, w, dtype=dtype)
    v = np.linspace(-1.0, 1.0, h, dtype=dtype)
    uu, vv = np.meshgrid(u, v)
    return uu.ravel(), vv.ravel()


def _source_coords(h, w, sc, tx, ty, th, dtype):
    u, v = _base_grid(h, w, dtype)
    cu, su = np.cos(th), np.sin(th)
    du, dv = u - tx, v - ty
    src_u = (cu * du + su * dv) / sc
    src_v = (-su * du + cu * dv) / sc
    return np.stack([src_u, src_v], axis=1)


def warp_image(img, sc, tx, ty, th):
    """Geometric warp of an (H,W,C) image tensor, zero beyond the border."""
    img = ad.as_tensor(img)
    h, w, c = img.value.shape
    grid = ad.transpose(img, (2, 0, 1))
    src = _source_coords(h, w, sc, tx, ty, th, img.value.dtype)
    out = ad.grid_sample(grid, ad.constant(src), zero_outside=True)
    return ad.reshape(out, (h, w, c))


def _warp_numpy(img, sc, tx, ty, th):
    h, w, c = img.shape
    src = _source_coords(h, w, sc, tx, ty, th, img.dtype)
    grid = np.ascontiguousarray(img.transpose(2, 0, 1))
    return backend.gather(grid, src, True).reshape(h, w, c)


class PyramidL1:
    """Mean L1 over a downsampling pyramid (stand-in for a learned
    perceptual distance; coarse levels give the pose smooth gradients)."""

    def __init__(self, levels=3):
        self.levels = levels

    def __call__(self, a, b):
        total = None
        for lv in range(self.levels):
            d = ad.mean(ad.absolute(ad.sub(a, b)))
            total = d if total is None else ad.add(total, d)
            if lv < self.levels - 1:
                a = _downsample2(a)
                b = _downsample2(b)
        return ad.mul(total, 1.0 / self.levels)


def _downsample2(img):
    t = ad.as_tensor(img)
    h, w, c = t.value.shape
    if h % 2 or w % 2:
        t = t[: h - h % 2, : w - w % 2, :]
        h, w = h - h % 2, w - w % 2
    t = ad.reshape(t, (h // 2, 2, w // 2, 2, c))
    return ad.mean(t, axis=(1, 3))


def augmented_loss(pred, target, k_augment=16, seed=0, distance=None,
                   scale=(0.8, 1.2), translate=0.1, rotate_deg=10.0):
    """(1/K) sum_k D(A_k(pred), A_k(target)); A_k identical for both images.

    Differentiable w.r.t. pred; target may be a plain array.
    """
    if k_augment < 1:
        raise ValueError("k_augment must be >= 1")
    pred = ad.as_tensor(pred)
    target = target.value if isinstance(target, ad.Tensor) else np.asarray(target)
    target = target.astype(pred.value.dtype)
    if pred.value.shape != target.shape:
        raise ValueError("pred/target dimensions differ")
    distance = distance or PyramidL1()
    total = None
    for k in range(k_augment):
        sc, tx, ty, th = _warp_params(seed, k, scale, translate, rotate_deg)
        a = warp_image(pred, sc, tx, ty, th)
        b = ad.constant(_warp_numpy(target, sc, tx, ty, th))
        d = distance(a, b)
        total = d if total is None else ad.add(total, d)
    return ad.mul(total, 1.0 / k_augment)


class OracleBootstrapper:
    """Ground truth perturbed by a configured rotation angle and latent noise."""

    def __init__(self, gt_code, gt_pose, noise_rot_deg=0.0,
                 noise_latent_sigma=0.0, seed=0):
        self.gt_w = gt_code.numpy() if isinstance(gt_code, LatentCode) \
            else np.asarray(gt_code)
        self.gt_pose = gt_pose.numpy()
        self.noise_rot_deg = noise_rot_deg
        self.noise_latent_sigma = noise_latent_sigma
        self.seed = seed

    def __call__(self, image=None):
        rng = np.random.default_rng(self.seed)
        p = self.gt_pose
        q = (perturb_quaternion(p.q, self.noise_rot_deg, rng)
             if self.noise_rot_deg else p.q.copy())
        w = self.gt_w.copy()
        if self.noise_latent_sigma:
            w = w + rng.standard_normal(w.shape) * self.noise_latent_sigma
        pose = PoseParams(q, p.s, p.t2.copy(), p.z0)
        return LatentCode(ad.constant(w), mode="W"), pose


class RegressorPnPBootstrapper:
    """Latent from the fitted regressor; pose from PnP on the canonical map."""

    def __init__(self, regressor, focal_candidates, mask_threshold=0.5):
        self.regressor = regressor
        self.focal_candidates = list(focal_candidates)
        self.mask_threshold = mask_threshold

    def __call__(self, image):
        w_hat = self.regressor.predict(image["rgb"], image["mask"])
        obs = extract_observation(_as_output(image), self.mask_threshold)
        sol = solve_pnp_focal_sweep(obs, self.focal_candidates)
        return LatentCode(ad.constant(w_hat), mode="W"), sol.pose


def _as_output(image):
    class _O:
        pass
    o = _O()
    o.mask = np.asarray(image["mask"])
    o.canonical = np.asarray(image["canonical"])
    return o


def bootstrap(image, bootstrapper):
    """First guess of (latent, pose); the latent comes back expanded to W+."""
    code, pose = bootstrapper(image)
    return code.to_wplus(), pose


def invert(target, init, cfg: InversionConfig, gen, gt_pose=None,
           heldout=None, distance=None, target_mask=None) -> InversionState:
    """Jointly refine latent and pose against the target image.

    `init` is (LatentCode, PoseParams); the generator stays frozen. Traces
    hold one entry per step plus the post-update final value. When the
    target's segmentation mask is given it joins the distance as an extra
    channel weighted by cfg.mask_weight.
    """
    target = np.asarray(target, dtype=np.float64)
    init_code, init_pose = init
    use_mask = target_mask is not None and cfg.mask_weight > 0
    if use_mask:
        target_ch = np.concatenate(
            [target, cfg.mask_weight * np.asarray(target_mask)[:, :, None]],
            axis=2)
    else:
        target_ch = target
    dt = gen.cfg.np_dtype()

    if cfg.latent_mode == "W_plus":
        lat0 = init_code.to_wplus().numpy()
    else:
        lat0 = (init_code.numpy() if init_code.mode == "W"
                else init_code.numpy().mean(axis=0))
    latent = ad.Parameter(lat0.astype(dt), name="latent")
    pose = init_pose.numpy().parameters()

    groups = []
    if cfg.optimize_latent:
        groups.append({"params": [latent], "lr": cfg.base_lr * cfg.latent_gain})
    if cfg.optimize_pose:
        groups.append({"params": [pose.q], "lr": cfg.base_lr,
                       "project": renormalize_()})
        groups.append({"params": [pose.s], "lr": cfg.base_lr,
                       "project": clamp_min_(1e-3)})
        groups.append({"params": [pose.t2, pose.z0], "lr": cfg.base_lr})
    opt = Adam(groups, beta1=cfg.beta1, beta2=cfg.beta2)
    rcfg = cfg.render_config()

    def current_code():
        return LatentCode(latent, mode=cfg.latent_mode)

    def make_state(step, loss_tr, psnr_tr, rot_tr, held_tr):
        moments = {f"g{gi}p{pi}": (m, v) for gi, pi, m, v in opt.state_arrays()}
        return InversionState(
            latent=current_code().to_wplus(), pose=pose.numpy(),
            moments=moments, step=step, loss_trace=loss_tr,
            psnr_trace=psnr_tr, rot_trace=rot_tr, heldout_trace=held_tr)

    loss_tr, psnr_tr, rot_tr, held_tr = [], [], [], []

    def trace_point(rgb_value):
        psnr_tr.append(psnr(rgb_value, target))
        if gt_pose is not None:
            rot_tr.append(rotation_error(pose.q.value, gt_pose.q))
        if cfg.trace_heldout and heldout is not None:
            with ad.no_grad():
                out = render_image(gen.realize(current_code()),
                                   pose_to_camera(heldout["pose"]), rcfg,
                                   cfg.width, cfg.height)
            held_tr.append(psnr(out.rgb, heldout["rgb"]))

    for step in range(cfg.n_steps):
        field = gen.realize(current_code())
        cam = pose_to_camera(pose)
        out = render(field, cam, rcfg, cfg.width, cfg.height,
                     outputs=("rgb", "mask"))
        if use_mask:
            h, w = out.mask.value.shape
            pred = ad.concatenate(
                [out.rgb, ad.mul(ad.reshape(out.mask, (h, w, 1)),
                                 cfg.mask_weight)], axis=2)
        else:
            pred = out.rgb
        loss = augmented_loss(pred, target_ch, cfg.n_augment,
                              seed=cfg.seed + step, distance=distance,
                              scale=cfg.aug_scale, translate=cfg.aug_translate,
                              rotate_deg=cfg.aug_rotate_deg)
        lval = float(loss.value)
        if not np.isfinite(lval):
            raise InversionDivergence(
                f"non-finite loss at step {step}",
                make_state(step, loss_tr, psnr_tr, rot_tr, held_tr))
        loss_tr.append(lval)
        trace_point(out.rgb.value)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()

    with ad.no_grad():
        final = render_image(gen.realize(current_code()), pose_to_camera(pose),
                             rcfg, cfg.width, cfg.height)
    trace_point(final.rgb)
    return make_state(cfg.n_steps, loss_tr, psnr_tr, rot_tr, held_tr)


def sweep_gains(scenes, gains=(1.0, 5.0, 10.0, 20.0), steps=40,
                cfg: InversionConfig = None):
    """Inversion dynamics per learning-rate gain, desk scale.

    `scenes` are prepared benchmark dicts (see benchmark.prepare_scene).
    Returns rows (scene, gain, step, psnr, heldout_view_psnr).
    """
    if len(scenes) < 1:
        raise ValueError("need at least one scene")
    base = cfg or InversionConfig()
    rows = []
    for si, sc in enumerate(scenes):
        for gain in gains:
            c = InversionConfig(
                n_steps=steps, base_lr=base.base_lr, latent_gain=gain,
                beta1=base.beta1, beta2=base.beta2, n_augment=base.n_augment,
                latent_mode=base.latent_mode, seed=base.seed,
                width=base.width, height=base.height, n_coarse=base.n_coarse,
                n_fine=base.n_fine, stratified=base.stratified,
                trace_heldout=True)
            state = invert(sc["target_rgb"], (sc["init_code"], sc["init_pose"]),
                           c, sc["gen"], gt_pose=sc["gt_pose"],
                           heldout=sc["heldout"])
            for step in range(len(state.psnr_trace)):
                rows.append({
                    "scene": si, "gain": gain, "step": step,
                    "psnr": state.psnr_trace[step],
                    "heldout_view_psnr": state.heldout_trace[step],
                })
    return rows

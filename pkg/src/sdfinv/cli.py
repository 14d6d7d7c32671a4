"""Command-line pipeline driver.

Subcommands mirror the library: render, pretrain-sphere, fit-scene,
gen-dataset, fit-regressor, estimate-pose, invert, sweep-gains, extract-mesh,
eval. Exit codes: 2 for unknown scenes/checkpoints/bad arguments, 3 for a
numerical abort (divergence), 0 otherwise. Every command takes --seed and is
byte-reproducible for a fixed seed.
"""

import argparse
import csv
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import benchmark, imgio
from .fit import FitConfig, fit_scene, load_generator, save_generator
from .geometry import PoseParams, look_at_pose, pose_to_camera, rotation_error
from .inversion import (InversionConfig, InversionDivergence,
                        OracleBootstrapper, RegressorPnPBootstrapper,
                        bootstrap, invert)
from .mesh_extract import extract_mesh, save_ply
from .metrics import MetricReport, metrics
from .pose_estimation import (default_focal_candidates, fit_latent_regressor,
                              extract_observation, generate_bootstrap_dataset,
                              load_dataset, solve_pnp_focal_sweep)
from .renderer import RenderConfig, render_image
from .scene_field import (FieldConfig, FieldGenerator, LatentCode,
                          PretrainDivergenceError, sphere_pretrain)
from .scenes import AnalyticSceneField, get_scene

DEPTH_SCALE = 8.0


class CliError(Exception):
    def __init__(self, message, code=2):
        super().__init__(message)
        self.code = code


def _dataclass_from(cfg_cls, section, overrides):
    """Build a config dataclass from a config-file section + CLI overrides."""
    names = {f.name for f in dc_fields(cfg_cls)}
    kwargs = {k: v for k, v in section.items() if k in names}
    kwargs.update({k: v for k, v in overrides.items()
                   if k in names and v is not None})
    return cfg_cls(**kwargs)


def _load_config(path):
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    return imgio.parse_config(p)


def _resolve_scene(name):
    try:
        return get_scene(name)
    except KeyError as e:
        raise CliError(str(e)) from e


def _resolve_generator(path):
    try:
        gen, extra = load_generator(path)
    except FileNotFoundError as e:
        raise CliError(f"checkpoint not found: {path}") from e
    except ValueError as e:
        raise CliError(f"bad checkpoint {path}: {e}") from e
    return gen, extra


def _parse_pose(args):
    if args.pose_vec:
        return PoseParams.from_vector([float(x) for x in args.pose_vec.split(",")])
    vals = [float(x) for x in args.pose.split(",")]
    az, el, dist = vals[:3]
    focal = vals[3] if len(vals) > 3 else 2.0
    return look_at_pose(az, el, dist, focal=focal)


def _write_render(out_dir, out):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    imgio.write_ppm(out_dir / "rgb.ppm", out.rgb)
    imgio.write_pgm16(out_dir / "mask.pgm", out.mask)
    imgio.write_pgm16(out_dir / "depth.pgm", out.depth, scale=DEPTH_SCALE)
    imgio.write_raw(out_dir / "canonical.raw", out.canonical)


def _field_for(args, seed):
    """Field + optional (generator, code) from --scene or --ckpt."""
    if args.ckpt:
        gen, extra = _resolve_generator(args.ckpt)
        w = extra.get("w0")
        if w is None:
            code = gen.mapping(np.zeros(gen.cfg.dim_z))
        else:
            code = LatentCode(ad.constant(w.astype(gen.cfg.np_dtype())))
        return gen.realize(code), gen, code
    scene = _resolve_scene(args.scene)
    return AnalyticSceneField(scene), None, None


def cmd_render(args):
    cfgfile = _load_config(args.config)
    rcfg = _dataclass_from(RenderConfig, cfgfile.get("render", {}),
                           {"seed": args.seed})
    field, _, _ = _field_for(args, args.seed)
    pose = _parse_pose(args)
    out = render_image(field, pose_to_camera(pose), rcfg,
                       args.width, args.height)
    _write_render(args.out, out)
    imgio.write_meta(Path(args.out) / "meta", {
        "pose": pose.to_vector(), "width": args.width, "height": args.height,
        "seed": args.seed})
    print(f"wrote render to {args.out}")


def cmd_pretrain_sphere(args):
    cfgfile = _load_config(args.config)
    fcfg = _dataclass_from(FieldConfig, cfgfile.get("field", {}), {})
    gen = FieldGenerator(fcfg, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    code = gen.mapping(rng.standard_normal(fcfg.dim_z))
    try:
        _, final = sphere_pretrain(gen, iters=args.iters, rng=rng, code=code,
                                   log_every=args.log_every)
    except PretrainDivergenceError as e:
        raise CliError(str(e), code=3) from e
    save_generator(args.out, gen, extra={"w0": code.numpy()})
    print(f"pretrained sphere field -> {args.out} (final loss {final:.2e})")


def cmd_fit_scene(args):
    cfgfile = _load_config(args.config)
    fcfg = _dataclass_from(FieldConfig, cfgfile.get("field", {}), {})
    fit_cfg = _dataclass_from(FitConfig, cfgfile.get("fit", {}), {
        "seed": args.seed, "steps": args.steps})
    scene = _resolve_scene(args.scene)
    try:
        gen, code, stats = fit_scene(scene, fcfg, fit_cfg,
                                     log_every=args.log_every)
    except RuntimeError as e:
        raise CliError(f"fit aborted: {e}", code=3) from e
    save_generator(args.out, gen, extra={"w0": code.numpy()})
    print(f"fit {scene.name}: loss {stats['final_loss']:.4f}, "
          f"first-view psnr {stats['first_view_psnr']:.2f} dB -> {args.out}")


def cmd_gen_dataset(args):
    gen, extra = _resolve_generator(args.ckpt)
    scene = _resolve_scene(args.scene) if args.scene else None
    sampler = (scene.sample_pose if scene
               else lambda rng: _default_pose_sampler(rng))
    generate_bootstrap_dataset(
        gen, args.n, sampler, args.out, width=args.width, height=args.height,
        seed=args.seed, render_cfg=RenderConfig(seed=args.seed))
    print(f"wrote {args.n} records to {args.out}")


def _default_pose_sampler(rng):
    from .scenes import PoseDistribution
    return PoseDistribution().sample(rng)


def cmd_fit_regressor(args):
    records = load_dataset(args.dataset)
    if not records:
        raise CliError(f"no records in {args.dataset}")
    reg, mse = fit_latent_regressor(records)
    imgio.save_checkpoint(args.out, {"weights": reg.weights,
                                     "side": np.array(float(reg.side))})
    print(f"regressor trained on {len(records)} records, MSE {mse:.4e} "
          f"-> {args.out}")


def _load_regressor(path):
    from .pose_estimation import LatentRegressor
    blob = imgio.load_checkpoint(path)
    return LatentRegressor(blob["weights"].astype(np.float64),
                           int(blob["side"]))


def cmd_estimate_pose(args):
    record = Path(args.record)
    if not record.exists():
        raise CliError(f"record not found: {record}")
    mask = imgio.read_pgm16(record / "mask.pgm")
    canon = imgio.read_raw(record / "canonical.raw")

    class _O:
        pass
    o = _O()
    o.mask, o.canonical = mask, canon
    obs = extract_observation(o, args.mask_threshold)
    cands = ([float(x) for x in args.focal_candidates.split(",")]
             if args.focal_candidates
             else default_focal_candidates(_default_pose_dist()))
    sol = solve_pnp_focal_sweep(obs, sorted(cands))
    print("pose:", " ".join(f"{v:.6f}" for v in sol.pose.to_vector()))
    print(f"focal {sol.focal:.4f}  reprojection {sol.reprojection_error:.3e}")
    meta_path = record / "meta"
    if meta_path.exists():
        gt = PoseParams.from_vector(imgio.read_meta(meta_path)["pose"])
        print(f"rotation error vs record pose: "
              f"{rotation_error(sol.pose.q, gt.q):.4f} deg")


def _default_pose_dist():
    from .scenes import PoseDistribution
    return PoseDistribution()


def cmd_invert(args):
    cfgfile = _load_config(args.config)
    icfg = _dataclass_from(InversionConfig, cfgfile.get("inversion", {}), {
        "n_steps": args.steps, "latent_gain": args.gain, "seed": args.seed,
        "width": args.width, "height": args.height,
        "n_augment": args.augmentations})
    gen, extra = _resolve_generator(args.ckpt)
    gen.freeze()
    if "w0" not in extra or "gt_pose" not in extra:
        raise CliError("checkpoint lacks ground-truth latent/pose for the "
                       "oracle bootstrap (build it with the benchmark or "
                       "pass a record via gen-dataset + --regressor)")
    code = LatentCode(ad.constant(extra["w0"].astype(gen.cfg.np_dtype())))
    gt_pose = PoseParams.from_vector(extra["gt_pose"].astype(np.float64))
    rcfg = icfg.render_config()
    with ad.no_grad():
        target = render_image(gen.realize(code), pose_to_camera(gt_pose),
                              rcfg, icfg.width, icfg.height)
    if args.regressor:
        reg = _load_regressor(args.regressor)
        cands = default_focal_candidates(_default_pose_dist())
        boot = RegressorPnPBootstrapper(reg, cands)
        image = {"rgb": target.rgb, "mask": target.mask,
                 "canonical": target.canonical}
    else:
        boot = OracleBootstrapper(code, gt_pose, args.noise_rot,
                                  args.noise_latent, seed=args.seed)
        image = None
    init = bootstrap(image, boot)
    try:
        state = invert(target.rgb, init, icfg, gen, gt_pose=gt_pose)
    except InversionDivergence as e:
        raise CliError(f"inversion aborted: {e}", code=3) from e
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with ad.no_grad():
        final = render_image(gen.realize(state.latent),
                             pose_to_camera(state.pose), rcfg,
                             icfg.width, icfg.height)
    _write_render(out_dir, final)
    imgio.write_ppm(out_dir / "target.ppm", target.rgb)
    with open(out_dir / "trace.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["step", "loss", "psnr", "rot_err"])
        for i, p in enumerate(state.psnr_trace):
            loss = state.loss_trace[i] if i < len(state.loss_trace) else ""
            rot = state.rot_trace[i] if i < len(state.rot_trace) else ""
            wr.writerow([i, loss, p, rot])
    print(f"inverted {args.steps} steps: psnr {state.psnr_trace[0]:.2f} -> "
          f"{state.psnr_trace[-1]:.2f} dB, rot err "
          f"{state.rot_trace[0]:.2f} -> {state.rot_trace[-1]:.2f} deg")


def cmd_sweep_gains(args):
    work = Path(args.work)
    scene_dirs, _ = benchmark.prepare_scenes(
        work, args.n_scenes, size=args.size, seed0=args.seed + 1)
    gains = [float(g) for g in args.gains.split(",")]
    rows = benchmark.run_gain_sweep(
        scene_dirs, gains=gains, steps=args.steps, seed=args.seed,
        csv_path=args.out_csv, plot_path=args.out_plot)
    print(f"swept {len(gains)} gains x {args.steps} steps on "
          f"{args.n_scenes} scenes -> {args.out_csv}")
    return rows


def cmd_extract_mesh(args):
    field, _, _ = _field_for(args, args.seed)
    mesh = extract_mesh(field, args.resolution)
    save_ply(args.out, mesh, binary=args.binary)
    print(f"extracted {len(mesh.triangles)} triangles, "
          f"{len(mesh.vertices)} vertices -> {args.out}")


def _read_render_dir(path):
    path = Path(path)
    if not path.exists():
        raise CliError(f"render dir not found: {path}")

    class _O:
        pass
    o = _O()
    o.rgb = imgio.read_ppm(path / "rgb.ppm")
    o.mask = imgio.read_pgm16(path / "mask.pgm")
    return o, path / "meta"


def cmd_eval(args):
    pred, pmeta = _read_render_dir(args.pred)
    gt, gmeta = _read_render_dir(args.gt)
    pp = gp = None
    if pmeta.exists() and gmeta.exists():
        pp = PoseParams.from_vector(imgio.read_meta(pmeta)["pose"])
        gp = PoseParams.from_vector(imgio.read_meta(gmeta)["pose"])
    report = metrics(pred, gt, pp, gp)
    print(report.line())
    return report


def build_parser():
    ap = argparse.ArgumentParser(
        prog="sdfinv",
        description="differentiable SDF field rendering, pose estimation, "
                    "and hybrid inversion on procedural scenes")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", help="TOML-style config file")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render rgb/mask/canonical/depth")
    p.add_argument("--scene", default="sphere")
    p.add_argument("--ckpt")
    p.add_argument("--pose", default="30,20,2.7,2.0",
                   help="az,el,dist[,focal]")
    p.add_argument("--pose-vec", help="8 comma-separated pose params")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("pretrain-sphere", help="initialize an SDF to a sphere")
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(fn=cmd_pretrain_sphere)

    p = sub.add_parser("fit-scene", help="fit a generator to an analytic scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(fn=cmd_fit_scene)

    p = sub.add_parser("gen-dataset", help="render a bootstrap dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", help="pose distribution source")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.set_defaults(fn=cmd_gen_dataset)

    p = sub.add_parser("fit-regressor", help="train the latent regressor")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_fit_regressor)

    p = sub.add_parser("estimate-pose", help="PnP + focal sweep on a record")
    p.add_argument("--record", required=True)
    p.add_argument("--mask-threshold", type=float, default=0.5)
    p.add_argument("--focal-candidates")
    p.set_defaults(fn=cmd_estimate_pose)

    p = sub.add_parser("invert", help="hybrid inversion against a render")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--gain", type=float, default=5.0)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--augmentations", type=int, default=16)
    p.add_argument("--noise-rot", type=float, default=5.0)
    p.add_argument("--noise-latent", type=float, default=0.5)
    p.add_argument("--regressor", help="bootstrap from a trained regressor")
    p.set_defaults(fn=cmd_invert)

    p = sub.add_parser("sweep-gains", help="inversion dynamics per lr gain")
    p.add_argument("--work", required=True, help="scene cache directory")
    p.add_argument("--n-scenes", type=int, default=5)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--gains", default="1,5,10,20")
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--out-csv", default="sweep.csv")
    p.add_argument("--out-plot", default="sweep.png")
    p.set_defaults(fn=cmd_sweep_gains)

    p = sub.add_parser("extract-mesh", help="marching cubes to PLY")
    p.add_argument("--scene", default="sphere")
    p.add_argument("--ckpt")
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--binary", action="store_true")
    p.set_defaults(fn=cmd_extract_mesh)

    p = sub.add_parser("eval", help="PSNR/IoU between two render dirs")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(fn=cmd_eval)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (PretrainDivergenceError, InversionDivergence) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

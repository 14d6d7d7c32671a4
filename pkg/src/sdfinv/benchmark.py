"""Synthetic benchmark drivers: fit random scenes into frozen generators,
invert them from perturbed oracle bootstraps, and sweep learning-rate gains.

Scenes are prepared on disk (one directory per scene) so independent scenes
can run in separate processes; SDFINV_WORKERS caps the pool (default: cpu
count). Workers pin BLAS to one thread to avoid oversubscription.
"""

import csv
import multiprocessing as mp
import os
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import imgio
from .fit import FitConfig, fit_scene, load_generator, save_generator
from .geometry import PoseParams, pose_to_camera
from .inversion import (InversionConfig, OracleBootstrapper, bootstrap, invert,
                        sweep_gains)
from .renderer import render_image
from .scene_field import FieldConfig, LatentCode
from .scenes import random_scene

BENCH_FIT = dict(n_views=8, width=32, height=32, steps=240, batch_rays=640,
                 n_coarse=24, n_fine=16, pretrain_iters=200, density_lr=1e-2)
BENCH_NOISE_ROT_DEG = 5.0
BENCH_NOISE_LATENT_SIGMA = 0.5


def n_workers():
    env = os.environ.get("SDFINV_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def _pin_blas():
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def parallel_map(fn, items, workers=None):
    workers = workers or n_workers()
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        _pin_blas()
        return [fn(it) for it in items]
    ctx = mp.get_context("spawn")
    with ctx.Pool(processes=min(workers, len(items)),
                  initializer=_pin_blas) as pool:
        return pool.map(fn, items)


def build_scene(args):
    """Fit one random scene and write the benchmark record to disk."""
    seed, out_dir, size = args
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene = random_scene(seed)
    fit_cfg = FitConfig(seed=seed, **BENCH_FIT)
    gen, code, stats = fit_scene(scene, FieldConfig(), fit_cfg)

    rng = np.random.default_rng(seed + 90001)
    gt_pose = scene.sample_pose(rng)
    heldout_pose = scene.sample_pose(rng)
    rcfg = InversionConfig(width=size, height=size).render_config()
    with ad.no_grad():
        target = render_image(gen.realize(code), pose_to_camera(gt_pose),
                              rcfg, size, size)
        heldout = render_image(gen.realize(code), pose_to_camera(heldout_pose),
                               rcfg, size, size)
    save_generator(out_dir / "gen.ckpt", gen, extra={
        "w0": code.numpy(), "gt_pose": gt_pose.to_vector(),
        "heldout_pose": heldout_pose.to_vector(), "size": size,
        "seed": seed,
    })
    imgio.write_raw(out_dir / "target_rgb.raw", target.rgb)
    imgio.write_raw(out_dir / "heldout_rgb.raw", heldout.rgb)
    imgio.write_ppm(out_dir / "target.ppm", target.rgb)
    return {"dir": str(out_dir), "seed": seed,
            "fit_psnr": stats["first_view_psnr"],
            "fit_seconds": stats["seconds"]}


def prepare_scenes(base_dir, n_scenes, size=64, workers=None, seed0=1):
    base_dir = Path(base_dir)
    jobs = [(seed0 + i, str(base_dir / f"scene_{i:03d}"), size)
            for i in range(n_scenes)]
    jobs = [j for j in jobs if not (Path(j[1]) / "gen.ckpt").exists()]
    stats = parallel_map(build_scene, jobs, workers)
    return sorted(str(p) for p in base_dir.glob("scene_*")), stats


def load_scene(scene_dir):
    scene_dir = Path(scene_dir)
    gen, extra = load_generator(scene_dir / "gen.ckpt")
    gen.freeze()
    seed = int(extra["seed"])
    code = LatentCode(ad.constant(extra["w0"].astype(gen.cfg.np_dtype())))
    gt_pose = PoseParams.from_vector(extra["gt_pose"].astype(np.float64))
    heldout_pose = PoseParams.from_vector(extra["heldout_pose"].astype(np.float64))
    boot = OracleBootstrapper(code, gt_pose,
                              noise_rot_deg=BENCH_NOISE_ROT_DEG,
                              noise_latent_sigma=BENCH_NOISE_LATENT_SIGMA,
                              seed=seed + 7)
    init_code, init_pose = bootstrap(None, boot)
    return {
        "gen": gen, "gt_code": code, "gt_pose": gt_pose,
        "target_rgb": imgio.read_raw(scene_dir / "target_rgb.raw"),
        "init_code": init_code, "init_pose": init_pose,
        "heldout": {"pose": heldout_pose,
                    "rgb": imgio.read_raw(scene_dir / "heldout_rgb.raw")},
        "size": int(extra["size"]), "seed": seed,
    }


def _invert_task(args):
    scene_dir, variants, seed = args
    sc = load_scene(scene_dir)
    size = sc["size"]
    out = {"dir": scene_dir}
    for label, n_steps, gain in variants:
        cfg = InversionConfig(n_steps=n_steps, latent_gain=gain, seed=seed,
                              width=size, height=size)
        state = invert(sc["target_rgb"], (sc["init_code"], sc["init_pose"]),
                       cfg, sc["gen"], gt_pose=sc["gt_pose"])
        out[label] = {
            "psnr_init": state.psnr_trace[0],
            "psnr_final": state.psnr_trace[-1],
            "rot_init": state.rot_trace[0],
            "rot_final": state.rot_trace[-1],
            "psnr_trace": state.psnr_trace,
        }
    return out


def run_hybrid_benchmark(scene_dirs, workers=None, seed=0,
                         variants=(("slow", 30, 5.0), ("fast", 10, 20.0))):
    """Hybrid slow/fast inversion on every scene; returns per-scene results."""
    jobs = [(d, list(variants), seed) for d in scene_dirs]
    return parallel_map(_invert_task, jobs, workers)


def _sweep_task(args):
    scene_dir, gains, steps, seed = args
    sc = load_scene(scene_dir)
    size = sc["size"]
    cfg = InversionConfig(seed=seed, width=size, height=size)
    rows = sweep_gains([sc], gains=gains, steps=steps, cfg=cfg)
    for r in rows:
        r["scene_dir"] = scene_dir
    return rows


def run_gain_sweep(scene_dirs, gains=(1.0, 5.0, 10.0, 20.0), steps=40,
                   workers=None, seed=0, csv_path=None, plot_path=None):
    jobs = [(d, tuple(gains), steps, seed) for d in scene_dirs]
    nested = parallel_map(_sweep_task, jobs, workers)
    rows = []
    for si, chunk in enumerate(nested):
        for r in chunk:
            r["scene"] = si
            rows.append(r)
    if csv_path:
        write_sweep_csv(rows, csv_path)
    if plot_path:
        plot_sweep(rows, plot_path)
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["scene", "gain", "step", "psnr", "heldout_view_psnr"])
        for r in rows:
            wr.writerow([r["scene"], r["gain"], r["step"],
                         f"{r['psnr']:.4f}", f"{r['heldout_view_psnr']:.4f}"])


def plot_sweep(rows, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    gains = sorted({r["gain"] for r in rows})
    scenes = sorted({r["scene"] for r in rows})
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for gain in gains:
        curves_in, curves_out = [], []
        for s in scenes:
            sub = sorted((r for r in rows
                          if r["gain"] == gain and r["scene"] == s),
                         key=lambda r: r["step"])
            curves_in.append([r["psnr"] for r in sub])
            curves_out.append([r["heldout_view_psnr"] for r in sub])
        mean_in = np.mean(np.array(curves_in), axis=0)
        mean_out = np.mean(np.array(curves_out), axis=0)
        axes[0].plot(mean_in, label=f"gain {gain:g}x")
        axes[1].plot(mean_out, label=f"gain {gain:g}x")
    axes[0].set_title("input-view PSNR")
    axes[1].set_title("held-out-view PSNR")
    for axis in axes:
        axis.set_xlabel("step")
        axis.set_ylabel("PSNR (dB)")
        axis.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def summarize_hybrid(results):
    """Improvement stats for the slow/fast schedules."""
    d_slow = [r["slow"]["psnr_final"] - r["slow"]["psnr_init"] for r in results]
    d_fast = [r["fast"]["psnr_final"] - r["fast"]["psnr_init"] for r in results]
    return {
        "slow_gains_db": d_slow,
        "fast_gains_db": d_fast,
        "slow_frac_above_3db": float(np.mean([d >= 3.0 for d in d_slow])),
        "fast_vs_slow_ratio": float(np.mean(d_fast) / max(np.mean(d_slow), 1e-9)),
    }

"""Command line entry point: ``segcalib <command> ...``.

Set ``SEGCALIB_LOG`` (DEBUG, INFO, WARNING) to change verbosity.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .core import DYNAMIC_IDS, SKY, INVALID
from .errors import CalibrationError, ConfigError
from .optimize import calibrate, verify
from .reconstruction import (
    IcpParams,
    crop_radius,
    filter_by_range,
    merge_recursive,
    remove_dynamic,
)
from .render import RenderConfig, render
from .synth import (
    DEFAULT_GROUND_TRUTH,
    angle_error,
    default_camera,
    generate_scene,
    render_ground_truth,
    run_protocol,
    simulate_scans,
)

log = logging.getLogger("segcalib")

EXIT_USAGE = 2
EXIT_IO = 10


def _figure_path(out: Path, suffix: str) -> Path:
    return out.with_name(f"{out.stem}_{suffix}.png")


def _pose_fields(prefix, p):
    return {f"{prefix}.{k}": getattr(p, k) for k in ("tx", "ty", "tz", "yaw", "pitch")}


def _prepare_cloud(cloud, cfg, center=None):
    cloud = remove_dynamic(cloud, cfg.dynamic_classes)
    if cfg.crop_radius is not None and center is not None:
        cloud = crop_radius(cloud, center, cfg.crop_radius)
    return cloud


def cmd_reconstruct(args):
    scans = io.read_scans(args.scans, args.poses)
    if not scans:
        raise ConfigError("pose file lists no scans")
    params = IcpParams(args.max_corr, args.max_iter, args.convergence, args.voxel)
    scans = [filter_by_range(s, args.d_max) for s in scans]
    cloud = merge_recursive(scans, params)
    dyn = io.parse_classes(args.dynamic) if args.dynamic is not None else DYNAMIC_IDS
    cloud = remove_dynamic(cloud, dyn)
    if args.crop_radius is not None:
        center = [float(v) for v in args.crop_center.replace(",", " ").split()]
        cloud = crop_radius(cloud, center + [0.0] * (3 - len(center)), args.crop_radius)
    io.write_cloud(cloud, args.out)
    print(f"merged {len(scans)} scans into {len(cloud)} points -> {args.out}")


def _load_cfg(args):
    cfg = io.load_config(args.config) if args.config else io.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def cmd_calibrate(args):
    cfg = _load_cfg(args)
    cloud_path = args.cloud or cfg.cloud
    target_path = args.target or cfg.target
    if cloud_path is None or target_path is None:
        raise ConfigError("calibrate needs --cloud and --target (or [paths] in the config)")
    guess = io.parse_pose(args.guess) if args.guess else cfg.guess
    if guess is None:
        raise ConfigError("no initial guess: pass --guess or set [pose] guess")
    target = io.read_label_image(target_path)
    K = cfg.intrinsics or default_camera()
    if (K.height, K.width) != target.shape:
        raise ConfigError(f"intrinsics are {K.width}x{K.height}, target is "
                          f"{target.width}x{target.height}")
    cloud = _prepare_cloud(io.read_cloud(cloud_path), cfg, guess.position)

    result = calibrate(cloud, target, K, guess, cfg.bounds, cfg.loss, cfg.render,
                       cfg.options, keep_trace=True)
    trace = result.trace
    if cfg.verify_trials > 0:
        def rerun(g):
            return calibrate(cloud, target, K, g, cfg.bounds, cfg.loss, cfg.render, cfg.options)
        result = verify(result, guess, rerun, cfg.verify_noise, cfg.verify_trials,
                        cfg.seed, workers=cfg.workers)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fields = {"command": "calibrate", "loss_kind": str(cfg.loss)}
    fields.update(_pose_fields("guess", guess))
    fields.update(_pose_fields("pose", result.pose))
    fields["final_loss"] = result.final_loss
    fields["eval_count"] = result.eval_count
    fields["verified"] = result.verified
    fields["budget_exhausted"] = result.budget_exhausted
    if cfg.ground_truth is not None:
        gt = cfg.ground_truth
        fields["error.translation_cm"] = float(np.linalg.norm(result.pose.position - gt.position) * 100)
        fields["error.yaw_deg"] = angle_error(result.pose.yaw, gt.yaw)
        fields["error.pitch_deg"] = angle_error(result.pose.pitch, gt.pitch)
    tables = [
        ("stages", ["stage", "loss"], result.stage_history),
        ("trace", ["stage", "iteration", "best_loss", "tx", "ty", "tz", "yaw", "pitch"],
         [(s, i, f, *x) for s, i, f, x in trace]),
    ]
    io.write_report(out, fields, tables)
    if not args.no_figures:
        from .plotting import plot_trace, plot_views

        plot_views(_figure_path(out, "views"), target, render(cloud, result.pose, K, cfg.render),
                   render(cloud, guess, K, cfg.render), title="calibration")
        plot_trace(_figure_path(out, "trace"), trace)
    print(f"pose {result.pose.tx:.4f} {result.pose.ty:.4f} {result.pose.tz:.4f} "
          f"{result.pose.yaw:.4f} {result.pose.pitch:.4f} loss {result.final_loss:.6g} -> {out}")


def cmd_render(args):
    cloud = io.read_cloud(args.cloud)
    cloud = remove_dynamic(cloud, DYNAMIC_IDS)
    pose = io.parse_pose(args.pose)
    K = io.parse_intrinsics(args.intrinsics)
    try:
        cfg = RenderConfig(args.lam, args.min_radius, args.max_radius,
                           SKY if args.background == "sky" else INVALID)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    img = render(cloud, pose, K, cfg)
    io.write_label_image(img, args.out, binary=not args.ascii)
    if args.png:
        from matplotlib.image import imsave

        imsave(args.png, img.palette.to_rgb8(img.grid), metadata={"Software": None})
    print(f"rendered {len(cloud)} points -> {args.out}")


def cmd_evaluate(args):
    cfg = _load_cfg(args)
    spec = io.read_scene_spec(args.scene_spec)
    if args.trials is not None:
        cfg.trials = args.trials
    if args.keep is not None:
        cfg.keep = args.keep
    if not 1 <= cfg.keep <= cfg.trials:
        raise ConfigError("need trials >= keep >= 1")
    K = cfg.intrinsics or default_camera()
    g = cfg.ground_truth or DEFAULT_GROUND_TRUTH
    cloud = remove_dynamic(generate_scene(spec), cfg.dynamic_classes | DYNAMIC_IDS)
    target = render_ground_truth(cloud, g, K, cfg.render, cfg.label_noise, cfg.seed)
    report = run_protocol(cloud, target, K, g, cfg.render, cfg.loss, cfg.trials, cfg.keep,
                          cfg.seed, cfg.bounds, cfg.bounds, cfg.options, cfg.workers)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fields = {
        "command": "evaluate",
        "points": len(cloud),
        "loss_kind": str(cfg.loss),
        "label_noise": cfg.label_noise,
        "trials": cfg.trials,
        "keep": cfg.keep,
        "seed": cfg.seed,
    }
    fields.update(_pose_fields("ground_truth", g))
    fields.update({
        "mean_translation_error_cm": report.mean_dt_cm,
        "mean_yaw_error_deg": report.mean_dyaw,
        "mean_pitch_error_deg": report.mean_dpitch,
        "mean_angle_error_deg": report.mean_dangle,
        "mean_loss_accepted": report.mean_loss_accepted,
        "mean_loss_all": report.mean_loss_all,
        "mean_start_offset_cm": report.mean_offset_cm,
    })
    rows = []
    for r in report.records:
        p = r.pose
        rows.append((r.trial, r.accepted, *r.offset, p.tx, p.ty, p.tz, p.yaw, p.pitch,
                     r.dt_cm, r.dyaw, r.dpitch, r.loss, r.evals, *r.stage_losses))
    columns = ["trial", "accepted", "off_tx", "off_ty", "off_tz", "off_yaw", "off_pitch",
               "tx", "ty", "tz", "yaw", "pitch", "dt_cm", "dyaw_deg", "dpitch_deg",
               "loss", "evals", "stage1", "stage2", "stage3"]
    io.write_report(out, fields, [("trials", columns, rows)])
    if not args.no_figures:
        from .plotting import plot_protocol

        plot_protocol(_figure_path(out, "trials"), report)
    print(f"accepted mean error {report.mean_dt_cm:.2f} cm, yaw {report.mean_dyaw:.3f} deg, "
          f"pitch {report.mean_dpitch:.3f} deg -> {out}")


def cmd_synth(args):
    spec = io.read_scene_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    if args.density is not None:
        spec.density = args.density
    if args.noise is not None:
        spec.noise_sigma = args.noise
    cloud = generate_scene(spec)
    io.write_cloud(cloud, args.out)
    if args.write_spec:
        io.write_scene_spec(spec, args.write_spec)
    print(f"{len(cloud)} points -> {args.out}")
    if args.scans:
        scan_dir = Path(args.scans)
        scan_dir.mkdir(parents=True, exist_ok=True)
        xy = [(-20.0 + 5.0 * i, 0.5) for i in range(args.num_scans)]
        scans, _ = simulate_scans(spec, xy, d_max=args.scan_range, seed=spec.seed)
        entries = []
        for i, s in enumerate(scans):
            name = f"scan_{i:03d}.xyz"
            io.write_cloud(s.cloud, scan_dir / name)
            entries.append((name, s.timestamp, s.vehicle_pose))
        io.write_poses(entries, scan_dir / "poses.txt")
        print(f"{len(scans)} scans -> {scan_dir}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="segcalib",
                                 description="Extrinsic camera calibration by semantic "
                                             "registration against a labeled point cloud.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="merge lidar scans into one labeled cloud")
    p.add_argument("--scans", required=True, help="directory of scan files")
    p.add_argument("--poses", required=True, help="pose file listing scans")
    p.add_argument("--out", required=True, help="output cloud (.ply or .xyz)")
    p.add_argument("--d-max", type=float, default=75.0, help="sensor range cutoff [m]")
    p.add_argument("--voxel", type=float, default=0.1, help="downsampling voxel [m]")
    p.add_argument("--max-corr", type=float, default=1.0, help="ICP correspondence radius [m]")
    p.add_argument("--max-iter", type=int, default=50, help="ICP iterations per pair")
    p.add_argument("--convergence", type=float, default=1e-6, help="ICP RMS improvement stop")
    p.add_argument("--dynamic", help="classes to remove (default: all dynamic)")
    p.add_argument("--crop-radius", type=float, help="keep points within this ground distance")
    p.add_argument("--crop-center", default="0,0", help="crop centre 'x,y'")
    p.add_argument("--seed", type=int, help="unused; accepted for uniformity")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("calibrate", help="estimate the camera pose")
    p.add_argument("--cloud", help="labeled cloud")
    p.add_argument("--target", help="label image (PGM)")
    p.add_argument("--config", help="run configuration (INI)")
    p.add_argument("--guess", help="initial pose 'tx ty tz yaw pitch'")
    p.add_argument("--out", required=True, help="report path")
    p.add_argument("--seed", type=int, help="seed for result verification")
    p.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("render", help="render a label view of a cloud")
    p.add_argument("--cloud", required=True)
    p.add_argument("--pose", required=True, help="'tx ty tz yaw pitch'")
    p.add_argument("--intrinsics", required=True, help="'fx fy cx cy width height'")
    p.add_argument("--out", required=True, help="output PGM")
    p.add_argument("--lambda", dest="lam", type=float, default=RenderConfig.lam)
    p.add_argument("--min-radius", type=float, default=RenderConfig.min_radius)
    p.add_argument("--max-radius", type=float, default=RenderConfig.max_radius)
    p.add_argument("--background", choices=("sky", "invalid"), default="sky")
    p.add_argument("--ascii", action="store_true", help="write plain (P2) PGM")
    p.add_argument("--png", help="also write a color PNG")
    p.add_argument("--seed", type=int, help="unused; accepted for uniformity")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("evaluate", help="run the randomized-start protocol on a synthetic scene")
    p.add_argument("--scene-spec", required=True, help="scene JSON or 'default'")
    p.add_argument("--config", help="run configuration (INI)")
    p.add_argument("--out", required=True, help="report path")
    p.add_argument("--trials", type=int)
    p.add_argument("--keep", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic labeled scene")
    p.add_argument("--spec", required=True, help="scene JSON or 'default'")
    p.add_argument("--out", required=True, help="output cloud (.ply or .xyz)")
    p.add_argument("--seed", type=int)
    p.add_argument("--density", type=float, help="points per square metre")
    p.add_argument("--noise", type=float, help="isotropic point jitter [m]")
    p.add_argument("--write-spec", help="also write the effective scene JSON")
    p.add_argument("--scans", help="also write simulated lidar scans to this directory")
    p.add_argument("--num-scans", type=int, default=9)
    p.add_argument("--scan-range", type=float, default=40.0)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SEGCALIB_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CalibrationError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points.

Subcommands: run (full mission), bench (completeness-evaluation comparison),
render (one-shot view of a saved map), eval (quality metrics of a saved map
against a scene), dump-config. Exit codes: 0 success, 1 configuration error,
2 stage failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import ConfigError, dump_default_yaml, dump_yaml, load_config


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="splatplan",
                                     description="Active splat-map reconstruction harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a full reconstruction mission")
    p_run.add_argument("--config", default=None, help="YAML mission config")
    p_run.add_argument("--scene", default=None,
                       help="scene file or builtin:<name> (overrides config)")
    p_run.add_argument("--out", default=None, help="output directory (overrides config)")
    p_run.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config value (dotted path)")

    p_bench = sub.add_parser("bench", help="completeness evaluation benchmark")
    p_bench.add_argument("--out", default="bench.csv", help="output CSV path")
    p_bench.add_argument("--repeats", type=int, default=5)

    p_render = sub.add_parser("render", help="render a saved map from a pose")
    p_render.add_argument("--map", required=True, help="saved map (text format)")
    p_render.add_argument("--grid", default=None, help="saved grid for completeness")
    p_render.add_argument("--pose", required=True, metavar="X,Y,Z,YAW_DEG")
    p_render.add_argument("--out", default="view", help="output path prefix")
    p_render.add_argument("--width", type=int, default=320)
    p_render.add_argument("--height", type=int, default=240)
    p_render.add_argument("--hfov-deg", type=float, default=70.0)
    p_render.add_argument("--near", type=float, default=0.1)
    p_render.add_argument("--far", type=float, default=20.0)

    p_eval = sub.add_parser("eval", help="PSNR / depth L1 of a saved map vs a scene")
    p_eval.add_argument("--map", required=True)
    p_eval.add_argument("--scene", required=True, help="scene file or builtin:<name>")
    p_eval.add_argument("--poses", type=int, default=20)

    sub.add_parser("dump-config", help="print the default config as YAML")

    args = parser.parse_args(argv)
    try:
        if args.command == "dump-config":
            sys.stdout.write(dump_default_yaml())
            return 0
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "bench":
            return _cmd_bench(args)
        if args.command == "render":
            return _cmd_render(args)
        if args.command == "eval":
            return _cmd_eval(args)
    except ConfigError as e:
        print(json.dumps({"error": str(e), "kind": "config"}), file=sys.stderr)
        return 1
    return 0


def _cmd_run(args) -> int:
    from .mission import StageError, run_mission

    cfg = load_config(args.config, args.overrides)
    if args.scene:
        cfg.scene_file = args.scene
    if args.out:
        cfg.out_dir = args.out
    if not cfg.scene_file:
        raise ConfigError("a scene is required: --scene or scene_file in the config")
    cfg.validate()
    try:
        metrics = run_mission(cfg)
    except StageError as e:
        print(json.dumps({"error": str(e.cause), "kind": "stage", "stage": e.stage}),
              file=sys.stderr)
        return 2
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.yaml"), "w", encoding="utf-8") as f:
        f.write(dump_yaml(cfg))
    last = metrics.rows[-1] if metrics.rows else {}
    print(json.dumps({
        "complete": metrics.complete, "iterations": metrics.iterations,
        "wall_time_s": round(metrics.wall_time_s, 2),
        "gaussians": last.get("gaussian_count"),
        "unknown_fraction": last.get("unknown_fraction"),
        "reachable_unknown_fraction": last.get("reachable_unknown_fraction"),
        "psnr_db": last.get("psnr_db"), "out_dir": cfg.out_dir}))
    return 0


def _cmd_bench(args) -> int:
    from .bench import bench_completeness

    rows = bench_completeness(repeats=args.repeats, out_csv=args.out)
    for r in rows:
        print(f"res={r.resolution:<5} {r.scenario:<7} baseline={r.baseline_ms:8.2f} ms  "
              f"ours={r.ours_ms:7.2f} ms  speedup={r.speedup:5.1f}x  "
              f"vol(base/ours)={r.volume_baseline:.3f}/{r.volume_ours:.3f} m^3")
    print(f"wrote {args.out}")
    return 0


def _cmd_render(args) -> int:
    from .geometry import CameraModel, Pose
    from .gsmap import load_map_text
    from .images import write_float_image, write_ppm
    from .renderer import render
    from .worldgrid import load_grid

    try:
        parts = [float(x) for x in args.pose.split(",")]
        if len(parts) != 4:
            raise ValueError
    except ValueError:
        raise ConfigError("--pose must be X,Y,Z,YAW_DEG")
    cam = CameraModel.from_hfov(args.width, args.height, np.deg2rad(args.hfov_deg),
                                args.near, args.far)
    pose = Pose.from_position_yaw(parts[:3], np.deg2rad(parts[3]))
    try:
        snap = load_map_text(args.map).snapshot()
        grid = load_grid(args.grid) if args.grid else None
        out = render(snap, pose, cam, grid=grid, want_completeness=grid is not None)
        write_ppm(args.out + "_color.ppm", out.color)
        write_float_image(args.out + "_depth.f32", out.depth, "depth")
        if out.completeness is not None:
            write_float_image(args.out + "_completeness.f32", out.completeness,
                              "completeness")
    except (OSError, ValueError) as e:
        print(json.dumps({"error": str(e), "kind": "stage", "stage": "render"}),
              file=sys.stderr)
        return 2
    print(f"wrote {args.out}_color.ppm (+ float channels)")
    return 0


def _cmd_eval(args) -> int:
    from .config import MissionConfig
    from .gsmap import load_map_text
    from .mission import eval_quality, eval_ring_poses, sensor_from_config
    from .scenes import resolve_scene

    try:
        snap = load_map_text(args.map).snapshot()
        scene = resolve_scene(args.scene)
        cfg = MissionConfig()
        sensor = sensor_from_config(cfg)
        poses = eval_ring_poses(scene, args.poses, cfg.eval.ring_height,
                                cfg.eval.ring_radius_fraction)
        psnr, l1 = eval_quality(snap, scene, poses, sensor)
    except (OSError, ValueError) as e:
        print(json.dumps({"error": str(e), "kind": "stage", "stage": "eval"}),
              file=sys.stderr)
        return 2
    print(json.dumps({"psnr_db": round(psnr, 3), "depth_l1_m": round(l1, 5),
                      "poses": args.poses}))
    return 0


if __name__ == "__main__":
    sys.exit(main())

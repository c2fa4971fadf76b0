"""Mission orchestration: the capture / fuse / plan / fly loop, metrics, evaluation.

Each iteration captures along the flown trajectory, fuses frames into the
splat map, carves the world grid, caches rendering loss, then plans the next
view and optimizes a trajectory to it. The run ends at MissionComplete (the
planner exhausts candidates and library), the iteration cap, or the wall
clock cap.

Metrics are split across two files: ``metrics.csv`` holds only
seed-deterministic quantities (so equal-seed runs are byte-identical) and
``timings.csv`` holds wall-clock stage timings.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .config import MissionConfig
from .fusion import fuse_frame
from .gain import dump_panorama_csv  # noqa: F401  (re-exported for harness users)
from .geometry import CameraModel, Pose
from .gsmap import DegenerateFrameError, MapSnapshot, SplatMap, save_map_text
from .images import write_float_image, write_ppm
from .planner import PlannerParams, ViewPlanner
from .renderer import render
from .scenes import resolve_scene
from .simenv import Scene, SensorModel, capture, execute
from .trajopt import (ConstraintSplats, Trajectory, construct_min_jerk, goal_state_from,
                      initial_guess, optimize, rest_state, select_constraint_splats)
from .worldgrid import UNKNOWN, WorldGrid, save_grid


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class MissionMetrics:
    rows: list = field(default_factory=list)
    complete: bool = False
    iterations: int = 0
    wall_time_s: float = 0.0

    def append(self, **kw) -> None:
        self.rows.append(kw)

    def column(self, name):
        return [r[name] for r in self.rows]


_METRIC_COLUMNS = ["iteration", "sim_time_s", "vl_size", "unknown_fraction",
                   "reachable_unknown_fraction", "gaussian_count", "psnr_db",
                   "depth_l1_m", "path_length_m"]


def write_metrics_csv(path, metrics: MissionMetrics) -> None:
    with open(path, "w", newline="", encoding="ascii") as f:
        wr = csv.writer(f)
        wr.writerow(_METRIC_COLUMNS)
        for row in metrics.rows:
            wr.writerow([_fmt(row[c]) for c in _METRIC_COLUMNS])


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def sensor_from_config(cfg: MissionConfig) -> SensorModel:
    cam = CameraModel.from_hfov(cfg.sensor.width, cfg.sensor.height,
                                np.deg2rad(cfg.sensor.hfov_deg),
                                cfg.sensor.range_min, cfg.sensor.range_max)
    return SensorModel(cam=cam, depth_noise_halfwidth=cfg.sensor.depth_noise_halfwidth,
                       range_min=cfg.sensor.range_min, range_max=cfg.sensor.range_max)


def gain_camera(cfg: MissionConfig) -> CameraModel:
    return CameraModel.from_hfov(cfg.gain.width, cfg.gain.height,
                                 np.deg2rad(cfg.sensor.hfov_deg),
                                 cfg.sensor.range_min, cfg.sensor.range_max)


def eval_ring_poses(scene: Scene, n: int, height: float, radius_fraction: float) -> list[Pose]:
    """Outward-facing ring of held-out evaluation poses inside the scene."""
    lo, hi = scene.bounds_lo, scene.bounds_hi
    center = (lo + hi) / 2.0
    radius = radius_fraction * min(hi[0] - lo[0], hi[1] - lo[1])
    poses = []
    for i in range(n):
        a = 2.0 * np.pi * i / n
        pos = np.array([center[0] + radius * np.cos(a),
                        center[1] + radius * np.sin(a), height])
        poses.append(Pose.from_position_yaw(pos, a))
    return poses


def eval_quality(snap: MapSnapshot, scene: Scene, poses: list[Pose],
                 sensor: SensorModel) -> tuple[float, float]:
    """Mean PSNR (dB, peak 1, capped at 99) and mean depth L1 (m) over poses,
    against noise-free ground-truth captures."""
    clean = SensorModel(cam=sensor.cam, depth_noise_halfwidth=0.0,
                        range_min=sensor.range_min, range_max=sensor.range_max)
    psnrs = []
    l1s = []
    for pose in poses:
        gt_rgb, gt_depth = capture(scene, pose, clean)
        out = render(snap, pose, sensor.cam)
        psnrs.append(psnr_db(out.color, gt_rgb))
        mask = np.isfinite(gt_depth) & (out.depth > 0)
        l1s.append(float(np.abs(out.depth - np.nan_to_num(gt_depth))[mask].mean())
                   if mask.any() else 0.0)
    return float(np.mean(psnrs)), float(np.mean(l1s))


def psnr_db(img: np.ndarray, ref: np.ndarray, cap: float = 99.0) -> float:
    mse = float(np.mean((np.asarray(img) - np.asarray(ref)) ** 2))
    if mse <= 0.0:
        return cap
    return float(min(10.0 * np.log10(1.0 / mse), cap))


def plan_trajectory(splat_map: SplatMap, cur_pos, cur_yaw, goal_pos, goal_yaw,
                    cfg: MissionConfig) -> tuple[Trajectory, object]:
    """Straight-line seed, constraint splats off its first second, then optimize."""
    ss = rest_state(cur_pos, cur_yaw)
    es = goal_state_from(cur_yaw, goal_pos, goal_yaw)
    way, durs = initial_guess(ss, es, cfg.trajopt, cfg.limits)
    seed = construct_min_jerk(way, durs, ss, es)
    splats = select_constraint_splats(splat_map, seed, cfg.trajopt.robot_radius)
    return optimize(ss, es, splats, cfg.limits, cfg.trajopt,
                    waypoints=way, durations=durs)


class _StageTimer:
    def __init__(self):
        self.records = []

    def stage(self, name: str, iteration: int):
        return _StageCtx(self, name, iteration)


class _StageCtx:
    def __init__(self, timer, name, iteration):
        self.timer = timer
        self.name = name
        self.iteration = iteration

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timer.records.append(
            (self.iteration, self.name, (time.perf_counter() - self.t0) * 1e3))
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def run_mission(cfg: MissionConfig, scene: Scene | None = None) -> MissionMetrics:
    cfg.validate()
    t_start = time.perf_counter()
    if scene is None:
        if not cfg.scene_file:
            raise StageError("setup", ValueError("no scene file configured"))
        scene = resolve_scene(cfg.scene_file)
    os.makedirs(cfg.out_dir, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    sensor = sensor_from_config(cfg)
    gcam = gain_camera(cfg)
    splat_map = SplatMap()
    grid = WorldGrid.from_bounds(scene.bounds_lo, scene.bounds_hi, cfg.grid.voxel_size)
    planner = ViewPlanner(cfg.planner, gcam, n_bins=cfg.gain.n_bins,
                          lambda_q=cfg.gain.lambda_quality)
    poses_eval = eval_ring_poses(scene, cfg.eval.n_poses, cfg.eval.ring_height,
                                 cfg.eval.ring_radius_fraction)
    reachable = ~scene.contains(_voxel_centers(grid))
    timer = _StageTimer()
    metrics = MissionMetrics()
    trace_path = os.path.join(cfg.out_dir, "trace.jsonl")
    trace_f = open(trace_path, "w", encoding="ascii")

    cur_pos = np.asarray(cfg.start_position, dtype=np.float64)
    cur_yaw = float(np.deg2rad(cfg.start_yaw_deg))
    sim_time = 0.0
    path_len = 0.0

    def observe(pose: Pose, rgb, depth, iteration: int):
        with timer.stage("fuse", iteration):
            try:
                fuse_frame(splat_map, rgb, depth, pose, sensor.cam, cfg.fusion)
            except DegenerateFrameError:
                return  # a frame staring at a too-close surface carries nothing
        with timer.stage("integrate", iteration):
            grid.integrate_depth(depth, pose, sensor.cam)
        with timer.stage("cache_loss", iteration):
            out = render(splat_map.snapshot(), pose, sensor.cam)
            # judge geometric quality on silhouette-normalized depth: the raw
            # composite is biased low by leftover transmittance, which would
            # read as permanent loss even for a perfectly fused surface
            sil = out.silhouette
            out.depth = np.where(sil > 0.2, out.depth / np.maximum(sil, 0.2), out.depth)
            # depth-discontinuity pixels blend fore/background and can never
            # converge at this fidelity; keep their loss out of the cache
            d = np.nan_to_num(depth, nan=np.inf)
            jump = np.zeros_like(depth, dtype=bool)
            jump[:, 1:] |= np.abs(np.diff(d, axis=1)) > cfg.gain.edge_depth_jump
            jump[:, :-1] |= np.abs(np.diff(d, axis=1)) > cfg.gain.edge_depth_jump
            jump[1:, :] |= np.abs(np.diff(d, axis=0)) > cfg.gain.edge_depth_jump
            jump[:-1, :] |= np.abs(np.diff(d, axis=0)) > cfg.gain.edge_depth_jump
            depth_for_loss = np.where(jump, np.nan, depth)
            grid.cache_loss(rgb, depth_for_loss, out, pose, sensor.cam,
                            lambda_c=cfg.gain.lambda_color,
                            beta=cfg.gain.loss_ema_beta,
                            loss_floor=cfg.gain.loss_floor)

    def record(iteration: int):
        with timer.stage("evaluate", iteration):
            psnr, l1 = eval_quality(splat_map.snapshot(), scene, poses_eval, sensor)
        unk = grid.state.reshape(-1) == UNKNOWN
        metrics.append(iteration=iteration, sim_time_s=sim_time,
                       vl_size=len(planner.library),
                       unknown_fraction=float(unk.mean()),
                       reachable_unknown_fraction=float(unk[reachable].mean()),
                       gaussian_count=len(splat_map), psnr_db=psnr, depth_l1_m=l1,
                       path_length_m=path_len)

    try:
        pose0 = Pose.from_position_yaw(cur_pos, cur_yaw)
        with timer.stage("capture", 0):
            rgb, depth = capture(scene, pose0, sensor, rng)
        observe(pose0, rgb, depth, 0)
        planner.mark_visited(cur_pos, cur_yaw)
        record(0)

        it = 0
        for it in range(1, cfg.max_iterations + 1):
            if time.perf_counter() - t_start > cfg.wall_clock_cap_s:
                break
            with timer.stage("plan", it):
                result = planner.plan_next(cur_pos, cur_yaw, splat_map.snapshot(),
                                           grid.snapshot(), rng)
            trace_f.write(json.dumps({
                "iteration": it, "complete": result.complete, "source": result.source,
                "goal": (None if result.goal is None else
                         [*map(float, result.goal.position), float(result.goal.yaw)]),
                **result.info}) + "\n")
            if result.complete:
                metrics.complete = True
                break
            goal = result.goal
            with timer.stage("trajectory", it):
                traj, _rep = plan_trajectory(splat_map, cur_pos, cur_yaw,
                                             goal.position, goal.yaw, cfg)
            with timer.stage("execute", it):
                frames = list(execute(traj, cfg.capture_rate_hz, scene, sensor, rng))
            for pose_i, rgb_i, depth_i in frames:
                observe(pose_i, rgb_i, depth_i, it)
            sim_time += traj.total_time
            path_len += _traj_length(traj)
            cur_pos = goal.position.copy()
            cur_yaw = frames[-1][0].yaw
            planner.mark_visited(cur_pos, cur_yaw)
            record(it)
        metrics.iterations = it
    finally:
        trace_f.close()
    metrics.wall_time_s = time.perf_counter() - t_start

    with timer.stage("artifacts", -1):
        write_metrics_csv(os.path.join(cfg.out_dir, "metrics.csv"), metrics)
        with open(os.path.join(cfg.out_dir, "timings.csv"), "w", newline="",
                  encoding="ascii") as f:
            wr = csv.writer(f)
            wr.writerow(["iteration", "stage", "elapsed_ms"])
            for rec in timer.records:
                wr.writerow([rec[0], rec[1], f"{rec[2]:.3f}"])
        save_map_text(os.path.join(cfg.out_dir, "map.txt"), splat_map.snapshot())
        save_grid(os.path.join(cfg.out_dir, "grid.bin"), grid)
        snap = splat_map.snapshot()
        for i, pose in enumerate(poses_eval[:4]):
            out = render(snap, pose, sensor.cam)
            write_ppm(os.path.join(cfg.out_dir, f"eval_{i:02d}_render.ppm"), out.color)
            write_float_image(os.path.join(cfg.out_dir, f"eval_{i:02d}_depth.f32"),
                              out.depth, "depth")
            gt_rgb, _ = capture(scene, pose, SensorModel(sensor.cam, 0.0,
                                                         sensor.range_min, sensor.range_max))
            write_ppm(os.path.join(cfg.out_dir, f"eval_{i:02d}_truth.ppm"), gt_rgb)
    return metrics


def _voxel_centers(grid: WorldGrid) -> np.ndarray:
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in grid.dims], indexing="ij"),
                   axis=-1).reshape(-1, 3)
    return grid.origin + (idx + 0.5) * grid.voxel_size


def _traj_length(traj: Trajectory) -> float:
    ts = np.linspace(0.0, traj.total_time, 40 * traj.n_segments + 1)
    pts = traj.sample_states(ts)["pos"][:, :3]
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))

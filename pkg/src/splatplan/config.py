"""Mission configuration: layered YAML with dotted-path CLI overrides.

Defaults live on the dataclasses; a config file overrides defaults; --set
key.path=value overrides the file. ``dump_default_yaml`` prints the full
effective default tree.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields

import numpy as np
import yaml

from .fusion import FusionConfig
from .planner import PlannerParams
from .trajopt import Limits, TrajOptParams


class ConfigError(ValueError):
    pass


@dataclass
class SensorConfig:
    width: int = 80
    height: int = 60
    hfov_deg: float = 70.0
    range_min: float = 0.5
    range_max: float = 3.0
    depth_noise_halfwidth: float = 0.02


@dataclass
class GridConfig:
    voxel_size: float = 0.1


@dataclass
class GainConfig:
    n_bins: int = 72
    width: int = 64
    height: int = 48
    lambda_color: float = 0.5   # color term weight inside the pixel loss
    lambda_quality: float = 0.5  # quality channel weight in the combined gain
    loss_ema_beta: float = 0.3
    loss_floor: float = 0.15    # residual level treated as converged when caching
    edge_depth_jump: float = 0.15  # measured-depth step marking discontinuity pixels


@dataclass
class EvalConfig:
    n_poses: int = 20
    ring_height: float = 1.5
    ring_radius_fraction: float = 0.33


@dataclass
class MissionConfig:
    scene_file: str = ""
    out_dir: str = "out"
    seed: int = 7
    max_iterations: int = 150
    wall_clock_cap_s: float = 900.0
    capture_rate_hz: float = 2.0
    start_position: tuple = (1.2, 1.2, 1.5)
    start_yaw_deg: float = 45.0
    sensor: SensorConfig = field(default_factory=SensorConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    gain: GainConfig = field(default_factory=GainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    planner: PlannerParams = field(default_factory=PlannerParams)
    trajopt: TrajOptParams = field(default_factory=TrajOptParams)
    limits: Limits = field(default_factory=Limits)

    def validate(self) -> None:
        if (self.scene_file and not self.scene_file.startswith("builtin:")
                and not os.path.exists(self.scene_file)):
            raise ConfigError(f"scene file not found: {self.scene_file}")
        s = self.sensor
        if not (0 < s.range_min < s.range_max):
            raise ConfigError("need 0 < range_min < range_max")
        if s.width <= 0 or s.height <= 0 or not (0 < s.hfov_deg < 180):
            raise ConfigError("bad sensor resolution or field of view")
        if s.depth_noise_halfwidth < 0:
            raise ConfigError("depth noise halfwidth must be >= 0")
        if self.grid.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")
        if self.max_iterations < 0 or self.wall_clock_cap_s <= 0:
            raise ConfigError("bad run limits")
        if self.capture_rate_hz <= 0:
            raise ConfigError("capture rate must be positive")
        if not (0 <= self.gain.lambda_quality <= 100) or self.gain.n_bins < 4:
            raise ConfigError("bad gain parameters")
        p = self.planner
        if p.gain_lower_bound < 0 or p.gain_cache_threshold < p.gain_lower_bound:
            raise ConfigError("need 0 <= gain_lower_bound <= gain_cache_threshold")
        if not (0 < p.n_samples <= 1000):
            raise ConfigError("bad sample count")
        if self.limits.v_max <= 0 or self.limits.a_max <= 0 or self.limits.yaw_rate_max <= 0:
            raise ConfigError("dynamic limits must be positive")
        if self.trajopt.rho <= 0:
            raise ConfigError("time weight rho must be positive")


def _sanitize(v):
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (list, tuple)):
        return [_sanitize(x) for x in v]
    return v


def _to_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = _to_dict(v)
        else:
            out[f.name] = _sanitize(v)
    return out


def _apply_dict(obj, data: dict, prefix: str = "") -> None:
    names = {f.name: f for f in fields(obj)}
    for key, val in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key: {prefix}{key}")
        cur = getattr(obj, key)
        if dataclasses.is_dataclass(cur):
            if not isinstance(val, dict):
                raise ConfigError(f"{prefix}{key} expects a mapping")
            _apply_dict(cur, val, prefix=f"{prefix}{key}.")
        else:
            if isinstance(cur, tuple) and isinstance(val, (list, tuple)):
                val = tuple(val)
            setattr(obj, key, val)


def load_config(path: str | None = None, overrides: list[str] | None = None) -> MissionConfig:
    cfg = MissionConfig()
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a mapping")
        _apply_dict(cfg, data)
    for ov in overrides or []:
        if "=" not in ov:
            raise ConfigError(f"override must look like key.path=value, got {ov!r}")
        key, _, raw = ov.partition("=")
        val = yaml.safe_load(raw)
        node = cfg
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not hasattr(node, part) or not dataclasses.is_dataclass(getattr(node, part)):
                raise ConfigError(f"unknown config group: {key}")
            node = getattr(node, part)
        leaf = parts[-1]
        if not hasattr(node, leaf):
            raise ConfigError(f"unknown config key: {key}")
        cur = getattr(node, leaf)
        if dataclasses.is_dataclass(cur):
            raise ConfigError(f"{key} is a group, not a value")
        if isinstance(cur, tuple) and isinstance(val, (list, tuple)):
            val = tuple(val)
        setattr(node, leaf, val)
    cfg.validate()
    return cfg


def dump_yaml(cfg: MissionConfig) -> str:
    return yaml.safe_dump(_to_dict(cfg), sort_keys=False)


def dump_default_yaml() -> str:
    return dump_yaml(MissionConfig())

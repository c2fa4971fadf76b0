"""Camera model and rigid poses.

Conventions used throughout the package:

* World frame: x/y horizontal, z up.
* Camera frame: x right, y down, z along the optical axis (forward).
* Depth images store the camera-frame z coordinate (not euclidean ray length).
* Pixel (u, v) has its center at continuous image coordinates (u + 0.5, v + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus the usable depth range in meters."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")

    @classmethod
    def from_hfov(cls, width: int, height: int, hfov_rad: float,
                  near: float, far: float) -> "CameraModel":
        """Square-pixel camera from a horizontal field of view."""
        fx = (width / 2.0) / np.tan(hfov_rad / 2.0)
        return cls(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                   width=width, height=height, near=near, far=far)

    @property
    def hfov(self) -> float:
        return 2.0 * np.arctan(self.width / (2.0 * self.fx))

    @property
    def vfov(self) -> float:
        return 2.0 * np.arctan(self.height / (2.0 * self.fy))

    @property
    def f_px(self) -> float:
        """Isotropic focal length used for projected splat radii and pixel footprints."""
        return float(np.sqrt(self.fx * self.fy))

    def scaled(self, width: int, height: int) -> "CameraModel":
        """Same field of view at a different resolution."""
        sx = width / self.width
        sy = height / self.height
        return CameraModel(fx=self.fx * sx, fy=self.fy * sy,
                           cx=self.cx * sx, cy=self.cy * sy,
                           width=width, height=height, near=self.near, far=self.far)

    def pixel_dirs(self) -> np.ndarray:
        """(H, W, 3) camera-frame ray directions through pixel centers, scaled to unit z.

        With this scaling the ray parameter equals camera z-depth, so a point at
        depth d along pixel (u, v) is ``origin + d * R @ dir``.
        """
        u = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        v = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv, np.ones_like(uu)], axis=-1)


@dataclass
class Pose:
    """Rigid camera-to-world transform: ``x_world = rotation @ x_cam + position``."""

    rotation: np.ndarray  # (3, 3)
    position: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.position.shape != (3,):
            raise ValueError("rotation must be (3,3) and position (3,)")

    @classmethod
    def from_position_yaw(cls, position, yaw: float) -> "Pose":
        """Level pose with the optical axis horizontal, pointing at azimuth ``yaw``.

        yaw = 0 looks along world +x; positive yaw rotates counterclockwise
        (toward +y) about world z.
        """
        c, s = np.cos(yaw), np.sin(yaw)
        # columns: camera x (right), y (down), z (forward) in world coordinates
        rot = np.array([
            [s, 0.0, c],
            [-c, 0.0, s],
            [0.0, -1.0, 0.0],
        ])
        return cls(rotation=rot, position=np.asarray(position, dtype=np.float64))

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2].copy()

    @property
    def yaw(self) -> float:
        f = self.rotation[:, 2]
        return float(np.arctan2(f[1], f[0]))

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - self.position) @ self.rotation

    def camera_to_world(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.position

    def ray_dirs_world(self, cam: CameraModel) -> np.ndarray:
        """(H, W, 3) world-frame pixel ray directions, scaled to unit camera z."""
        return cam.pixel_dirs() @ self.rotation.T


def backproject(depth: np.ndarray, pose: Pose, cam: CameraModel) -> np.ndarray:
    """World points for every pixel of a z-depth image; NaN where depth is invalid."""
    dirs = pose.ray_dirs_world(cam)
    return pose.position + depth[..., None] * dirs


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    out = -((-a + np.pi) % (2.0 * np.pi) - np.pi)
    return float(out) if out.ndim == 0 else out


def angle_diff(a: float, b: float) -> float:
    """Smallest signed difference a - b."""
    return wrap_angle(a - b)

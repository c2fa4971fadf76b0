"""360-degree information gain of a candidate viewpoint and optimal-yaw search.

A panorama is built from overlapping pinhole renders covering the full circle.
Per azimuth bin, the completeness channel (unobserved volume seen per pixel)
and the quality channel (cached loss reprojected from occupied voxels) are
averaged over the rays landing in the bin and scaled by the nominal rays-per-
bin count, which makes the panorama independent of where render seams fall.
Channels are normalized by their running 95th percentile over the mission so
that the combined gain is scale-free.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, Pose, wrap_angle
from .gsmap import MapSnapshot
from .renderer import render
from .worldgrid import OCCUPIED, WorldGrid


class InvalidViewpointError(ValueError):
    """Viewpoint lies inside an occupied voxel."""


@dataclass
class GainPanorama:
    viewpoint: np.ndarray
    bins: np.ndarray          # (B,) combined normalized gain
    completeness: np.ndarray  # (B,) raw channel
    quality: np.ndarray       # (B,) raw channel

    @property
    def n_bins(self) -> int:
        return self.bins.shape[0]

    @property
    def bin_width(self) -> float:
        return 2.0 * np.pi / self.n_bins


class GainNormalizer:
    """Running scale for the two gain channels.

    Each evaluation contributes its peak bin value per channel (zeros are
    skipped); the scale is the 95th percentile of those peaks over the
    mission. Pooling peaks rather than raw bins keeps the scale anchored to
    what a strong observation looks like, so gains genuinely shrink as the
    scene is finished instead of renormalizing against quiet panoramas.
    """

    def __init__(self, percentile: float = 95.0):
        self.percentile = percentile
        self._comp_peaks: list[float] = []
        self._qual_peaks: list[float] = []

    def update(self, comp_bins: np.ndarray, qual_bins: np.ndarray) -> None:
        pc = float(np.max(comp_bins)) if comp_bins.size else 0.0
        pq = float(np.max(qual_bins)) if qual_bins.size else 0.0
        if pc > 0.0:
            self._comp_peaks.append(pc)
        if pq > 0.0:
            self._qual_peaks.append(pq)

    def scales(self) -> tuple[float, float]:
        pc = (float(np.percentile(self._comp_peaks, self.percentile))
              if self._comp_peaks else 1.0)
        pq = (float(np.percentile(self._qual_peaks, self.percentile))
              if self._qual_peaks else 1.0)
        return max(pc, 1e-12), max(pq, 1e-12)


def evaluate_panorama(snap: MapSnapshot, grid: WorldGrid, position, cam: CameraModel,
                      lambda_q: float = 0.5, n_bins: int = 72,
                      normalizer: GainNormalizer | None = None) -> GainPanorama:
    """Panoramic gain at a position: completeness + lambda_q * quality per bin.

    Deterministic for fixed snapshots. Raises InvalidViewpointError if the
    position sits inside an occupied voxel.
    """
    position = np.asarray(position, dtype=np.float64)
    idx = grid.voxel_index(position)
    if grid.in_bounds(idx) and grid.state[idx] == OCCUPIED:
        raise InvalidViewpointError(f"viewpoint {position} is inside an occupied voxel")
    hfov = cam.hfov
    k_renders = int(np.ceil(2.0 * np.pi / hfov)) + 1
    comp_sum = np.zeros(n_bins)
    comp_cnt = np.zeros(n_bins, dtype=np.int64)
    qual_sum = np.zeros(n_bins)
    qual_cnt = np.zeros(n_bins, dtype=np.int64)
    for k in range(k_renders):
        yaw = wrap_angle(k * 2.0 * np.pi / k_renders)
        pose = Pose.from_position_yaw(position, yaw)
        out = render(snap, pose, cam, grid=grid, want_completeness=True)
        dirs = pose.ray_dirs_world(cam).reshape(-1, 3)
        az = np.arctan2(dirs[:, 1], dirs[:, 0])
        b = (np.floor((az % (2.0 * np.pi)) / (2.0 * np.pi / n_bins)).astype(np.int64)
             % n_bins)
        np.add.at(comp_sum, b, out.completeness.reshape(-1))
        np.add.at(comp_cnt, b, 1)
        unit = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        q = grid.reproject_loss(position, unit, cam.far)
        np.add.at(qual_sum, b, q)
        np.add.at(qual_cnt, b, 1)
    nominal = k_renders * cam.width * cam.height / n_bins
    comp = np.where(comp_cnt > 0, comp_sum / np.maximum(comp_cnt, 1) * nominal, 0.0)
    qual = np.where(qual_cnt > 0, qual_sum / np.maximum(qual_cnt, 1) * nominal, 0.0)
    if normalizer is not None:
        normalizer.update(comp, qual)
        sc, sq = normalizer.scales()
    else:
        sc = max(float(comp.max()), 1e-12)
        sq = max(float(qual.max()), 1e-12)
    bins = comp / sc + lambda_q * (qual / sq)
    return GainPanorama(viewpoint=position, bins=bins, completeness=comp, quality=qual)


def optimal_yaw(panorama: GainPanorama, hfov: float) -> tuple[float, float]:
    """Best yaw by circular sliding-window summation over the azimuth bins.

    Returns (yaw in (-pi, pi], windowed gain). Among windows of equal gain the
    one whose center is closest to its own gain centroid wins (so a single hot
    bin yields a centered view), then smaller |yaw|, then smaller yaw.
    """
    bins = panorama.bins
    b = bins.shape[0]
    width = 2.0 * np.pi / b
    w = int(round(hfov / width))
    w = min(max(w, 1), b)
    centers = (np.arange(b) + 0.5) * width
    best = None
    for s in range(b):
        gain = 0.0
        cx = 0.0
        cy = 0.0
        for i in range(w):
            j = (s + i) % b
            gain += bins[j]
            cx += bins[j] * np.cos(centers[j])
            cy += bins[j] * np.sin(centers[j])
        yaw = wrap_angle((s + w / 2.0) * width)
        if cx == 0.0 and cy == 0.0:
            centroid_dist = 0.0
        else:
            centroid_dist = abs(wrap_angle(yaw - np.arctan2(cy, cx)))
        key = (-gain, centroid_dist, abs(yaw), yaw)
        if best is None or key < best[0]:
            best = (key, yaw, gain)
    return best[1], best[2]


def dump_panorama_csv(path, panoramas: list[GainPanorama]) -> None:
    """One row per (viewpoint, bin): position, bin azimuth, channel values."""
    with open(path, "w", newline="", encoding="ascii") as f:
        wr = csv.writer(f)
        wr.writerow(["x", "y", "z", "azimuth_rad", "completeness", "quality", "combined"])
        for p in panoramas:
            width = p.bin_width
            for i in range(p.n_bins):
                wr.writerow([f"{p.viewpoint[0]:.6g}", f"{p.viewpoint[1]:.6g}",
                             f"{p.viewpoint[2]:.6g}", f"{(i + 0.5) * width:.9g}",
                             f"{p.completeness[i]:.9g}", f"{p.quality[i]:.9g}",
                             f"{p.bins[i]:.9g}"])

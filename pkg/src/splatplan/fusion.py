"""Incremental fusion of RGB-D frames into the splat map.

Fusion is geometric: the current map is rendered from the frame's pose, and a
strided subset of valid-depth pixels that are either uncovered (silhouette
below the densification threshold) or geometrically wrong (rendered depth too
far from measured) back-project into new splats. Optionally a few gradient
steps on color and opacity against the frame's photometric+depth loss follow;
centers and radii stay frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .geometry import CameraModel, Pose
from .gsmap import DegenerateFrameError, SplatMap
from .renderer import STOP_TRANSMITTANCE, project_and_sort, render


@dataclass
class FusionConfig:
    stride: int = 2
    initial_opacity: float = 0.9
    pixel_size_factor: float = 1.0
    densify_threshold: float = 0.5
    depth_error_threshold: float = 0.05
    min_valid_fraction: float = 0.01
    refine_steps: int = 0
    refine_lr: float = 0.05
    lambda_c: float = 0.5


@dataclass
class FusionReport:
    added: int
    considered: int
    valid_fraction: float
    refine_loss: tuple[float, float] | None = None  # (before, after)


def fuse_frame(splat_map: SplatMap, rgb: np.ndarray, depth: np.ndarray,
               pose: Pose, cam: CameraModel,
               config: FusionConfig | None = None) -> FusionReport:
    config = config or FusionConfig()
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    valid_fraction = float(valid.mean())
    if valid_fraction < config.min_valid_fraction:
        raise DegenerateFrameError(
            f"only {valid_fraction:.1%} of pixels carry valid depth")

    out = render(splat_map.snapshot(), pose, cam)
    s = max(int(config.stride), 1)
    off = s // 2
    vs = np.arange(off, cam.height, s)
    us = np.arange(off, cam.width, s)
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    sub_valid = valid[vv, uu]
    sub_depth = depth[vv, uu]
    sub_sil = out.silhouette[vv, uu]
    # composite depth is biased low wherever transmittance remains, so the
    # geometric check normalizes by silhouette and only fires on covered pixels.
    # It also only fires when the measurement is in front of the render: new
    # geometry there can occlude the wrong surface, whereas adding splats
    # behind existing ones can never fix the image and just grows the map.
    covered = sub_sil >= config.densify_threshold
    depth_hat = out.depth[vv, uu] / np.maximum(sub_sil, 1e-9)
    occluder_missing = covered & (
        depth_hat - np.nan_to_num(sub_depth) > config.depth_error_threshold)
    need = sub_valid & (~covered | occluder_missing)
    n_considered = int(sub_valid.sum())
    vsel = vv[need]
    usel = uu[need]
    dsel = sub_depth[need]
    added = int(dsel.shape[0])
    if added:
        dirs = pose.ray_dirs_world(cam)[vsel, usel]
        centers = pose.position[None, :] + dsel[:, None] * dirs
        radii = dsel * config.pixel_size_factor / cam.f_px
        colors = np.asarray(rgb, dtype=np.float64)[vsel, usel]
        opac = np.full(added, config.initial_opacity)
        splat_map.add_batch(centers, radii, colors, opac)

    report = FusionReport(added=added, considered=n_considered,
                          valid_fraction=valid_fraction)
    if config.refine_steps > 0 and len(splat_map) > 0:
        report.refine_loss = refine_appearance(splat_map, rgb, depth, pose, cam, config)
    return report


def _frame_loss(color, depth_r, rgb, depth_in, valid, lambda_c):
    ld = np.abs(depth_r - np.nan_to_num(depth_in))
    lc = np.abs(color - rgb).mean(axis=2)
    return float(np.mean((ld + lambda_c * lc)[valid]))


def refine_appearance(splat_map: SplatMap, rgb: np.ndarray, depth: np.ndarray,
                      pose: Pose, cam: CameraModel,
                      config: FusionConfig) -> tuple[float, float]:
    """Gradient descent on visible splats' color and opacity against this frame.

    Returns (loss before, loss after). The projection and pixel binning are
    reused across steps since geometry does not change.
    """
    depth = np.asarray(depth, dtype=np.float64)
    rgb = np.asarray(rgb, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    splats = project_and_sort(splat_map.snapshot(), pose, cam)
    if len(splats) == 0 or not valid.any():
        return (0.0, 0.0)
    offsets, order = K.bin_splats_csr(splats.px, splats.py, splats.r_pix,
                                      cam.width, cam.height)
    dirs = np.ascontiguousarray(pose.ray_dirs_world(cam).reshape(-1, 3))
    colors = splats.color.copy()
    opac = splats.opacity.copy()
    h, w = cam.height, cam.width
    dummy_state = np.zeros((1, 1, 1), dtype=np.uint8)
    zero3 = np.zeros(3)

    def forward():
        cimg = np.zeros((h, w, 3))
        dimg = np.zeros((h, w))
        simg = np.zeros((h, w))
        comp = np.zeros((h, w))
        K.render_pixels(offsets, order, splats.px, splats.py, splats.r_pix,
                        splats.depth, colors, opac, dirs, pose.position,
                        cam.near, cam.far, STOP_TRANSMITTANCE,
                        False, zero3, 1.0, dummy_state, dummy_state,
                        1.0, cimg, dimg, simg, comp)
        return cimg, dimg

    cimg, dimg = forward()
    loss0 = _frame_loss(cimg, dimg, rgb, depth, valid, config.lambda_c)
    for _ in range(config.refine_steps):
        gc = np.zeros_like(colors)
        go = np.zeros_like(opac)
        K.appearance_backward(offsets, order, splats.px, splats.py, splats.r_pix,
                              splats.depth, colors, opac,
                              np.sign(cimg - rgb), np.sign(dimg - np.nan_to_num(depth)),
                              valid, config.lambda_c, STOP_TRANSMITTANCE, gc, go)
        colors = np.clip(colors - config.refine_lr * gc, 0.0, 1.0)
        opac = np.clip(opac - config.refine_lr * go, 1e-4, 1.0)
        cimg, dimg = forward()
    loss1 = _frame_loss(cimg, dimg, rgb, depth, valid, config.lambda_c)
    splat_map.set_colors_opacities(splats.ids, colors, opac)
    return (loss0, loss1)

"""CPU splatting renderer.

One pass over depth-sorted splats produces color, z-depth, silhouette
(accumulated opacity) and, when a world grid is supplied, the per-pixel
unobserved-volume gain: each maximal unknown interval along the pixel ray
contributes its exact frustum volume weighted by the transmittance of the
splats composited strictly in front of its entry depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .geometry import CameraModel, Pose
from .gsmap import MapSnapshot
from .worldgrid import WorldGrid

STOP_TRANSMITTANCE = 1e-4


@dataclass
class RenderOutput:
    color: np.ndarray          # (H, W, 3) in [0, 1]
    depth: np.ndarray          # (H, W) meters, 0 where nothing composited
    silhouette: np.ndarray     # (H, W) accumulated opacity in [0, 1]
    completeness: np.ndarray | None  # (H, W) unobserved volume, m^3


@dataclass
class SortedSplatList:
    """Frustum-surviving splats projected to the image, ascending camera depth."""

    ids: np.ndarray      # (N,) indices into the source snapshot
    px: np.ndarray       # (N,) projected center, continuous pixel x
    py: np.ndarray       # (N,) projected center, continuous pixel y
    r_pix: np.ndarray    # (N,) projected radius in pixels
    depth: np.ndarray    # (N,) camera z
    color: np.ndarray    # (N, 3)
    opacity: np.ndarray  # (N,)

    def __len__(self) -> int:
        return self.ids.shape[0]


def project_and_sort(snap: MapSnapshot, pose: Pose, cam: CameraModel) -> SortedSplatList:
    """Project all splats, cull against the frustum, sort by camera depth.

    A splat survives if its depth lies in (near, far) and its projected center
    is inside the image rectangle expanded by 3x its projected radius.
    """
    if len(snap) == 0:
        e = np.empty(0)
        return SortedSplatList(np.empty(0, dtype=np.int64), e, e, e, e,
                               np.empty((0, 3)), e)
    pc = snap.centers @ pose.rotation - pose.position @ pose.rotation
    z = pc[:, 2]
    idx = np.flatnonzero((z > cam.near) & (z < cam.far))
    if idx.size == 0:
        e = np.empty(0)
        return SortedSplatList(idx.astype(np.int64), e, e, e, e, np.empty((0, 3)), e)
    zs = z[idx]
    px = cam.fx * pc[idx, 0] / zs + cam.cx
    py = cam.fy * pc[idx, 1] / zs + cam.cy
    r_pix = snap.radii[idx] * cam.f_px / zs
    m = 3.0 * r_pix
    keep = (px >= -m) & (px <= cam.width + m) & (py >= -m) & (py <= cam.height + m)
    idx, px, py, r_pix, zs = idx[keep], px[keep], py[keep], r_pix[keep], zs[keep]
    order = np.argsort(zs, kind="stable")
    return SortedSplatList(
        ids=idx[order].astype(np.int64),
        px=np.ascontiguousarray(px[order]),
        py=np.ascontiguousarray(py[order]),
        r_pix=np.ascontiguousarray(r_pix[order]),
        depth=np.ascontiguousarray(zs[order]),
        color=np.ascontiguousarray(snap.colors[idx[order]]),
        opacity=np.ascontiguousarray(snap.opacities[idx[order]]),
    )


def composite_pixel(alphas, colors, depths):
    """Front-to-back alpha blend of one pixel's ordered splats.

    Returns (color(3,), depth, silhouette); no background term is added.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    colors = np.atleast_2d(np.asarray(colors, dtype=np.float64))
    depths = np.asarray(depths, dtype=np.float64)
    color = np.zeros(3)
    depth = 0.0
    sil = 0.0
    trans = 1.0
    for i in range(alphas.shape[0]):
        w = alphas[i] * trans
        color += colors[i] * w
        depth += depths[i] * w
        sil += w
        trans *= 1.0 - alphas[i]
    return color, float(depth), float(sil)


def frustum_volume(d_in: float, d_out: float, fx: float, fy: float) -> float:
    """Exact volume of one pixel's frustum between depths d_in and d_out.

    The pixel footprint area grows as S(d) = d^2 / (fx * fy); the prismatoid
    formula (S_in + sqrt(S_in S_out) + S_out) (d_out - d_in) / 3 integrates it
    exactly because S is quadratic in d.
    """
    inv_ff = 1.0 / (fx * fy)
    s_in = d_in * d_in * inv_ff
    s_out = d_out * d_out * inv_ff
    return (s_in + np.sqrt(s_in * s_out) + s_out) * (d_out - d_in) / 3.0


def completeness_pixel(splat_alphas, splat_depths, intervals, cam: CameraModel) -> float:
    """Transmittance-weighted unobserved volume for one pixel ray.

    ``intervals`` is a sequence of (d_in, d_out) unknown spans; each is weighted
    by the product of (1 - alpha) over splats strictly in front of its entry.
    """
    splat_alphas = np.asarray(splat_alphas, dtype=np.float64)
    splat_depths = np.asarray(splat_depths, dtype=np.float64)
    total = 0.0
    for d_in, d_out in intervals:
        trans = np.prod(1.0 - splat_alphas[splat_depths < d_in])
        total += frustum_volume(d_in, d_out, cam.fx, cam.fy) * trans
    return float(total)


def render(snap: MapSnapshot, pose: Pose, cam: CameraModel,
           grid: WorldGrid | None = None, want_completeness: bool = False,
           stop_transmittance: float = STOP_TRANSMITTANCE) -> RenderOutput:
    """Render the map from a pose; optionally with the completeness channel.

    Pure over the snapshot and (a snapshot of) the grid; per-pixel work is
    independent, so the composite kernel runs its rows in parallel.
    """
    if want_completeness and grid is None:
        raise ValueError("completeness channel requires a world grid")
    h, w = cam.height, cam.width
    splats = project_and_sort(snap, pose, cam)
    offsets, order = K.bin_splats_csr(splats.px, splats.py, splats.r_pix, w, h)
    dirs = np.ascontiguousarray(pose.ray_dirs_world(cam).reshape(-1, 3))
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    sil = np.zeros((h, w))
    comp = np.zeros((h, w))
    if want_completeness:
        gstate = grid.state
        gbrick = grid.brick_summary()
        gorigin = grid.origin
        vox = grid.voxel_size
    else:
        gstate = np.zeros((1, 1, 1), dtype=np.uint8)
        gbrick = np.zeros((1, 1, 1), dtype=np.uint8)
        gorigin = np.zeros(3)
        vox = 1.0
    K.render_pixels(offsets, order, splats.px, splats.py, splats.r_pix,
                    splats.depth, splats.color, splats.opacity,
                    dirs, pose.position, cam.near, cam.far, stop_transmittance,
                    want_completeness, gorigin, vox, gstate, gbrick,
                    1.0 / (cam.fx * cam.fy), color, depth, sil, comp)
    return RenderOutput(color=color, depth=depth, silhouette=sil,
                        completeness=comp if want_completeness else None)

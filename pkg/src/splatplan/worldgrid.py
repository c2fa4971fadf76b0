"""Uniform voxel grid over the workspace: observation state plus cached quality loss.

States move one way only (unknown -> free -> occupied, never back), so the
unknown-voxel count is non-increasing over a mission. A per-brick summary of
unknown/occupied content is kept alongside the state array to let ray
traversals jump across homogeneous regions; it is refreshed lazily after
writes and never changes traversal results.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .geometry import CameraModel, Pose

UNKNOWN = K.UNKNOWN
FREE = K.FREE
OCCUPIED = K.OCCUPIED

GRID_MAGIC = b"SPGRID01"


@dataclass
class GridUpdateReport:
    freed: int
    occupied: int

    @property
    def changed(self) -> int:
        return self.freed + self.occupied


class WorldGrid:
    def __init__(self, origin, voxel_size: float, dims):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.voxel_size = float(voxel_size)
        self.dims = tuple(int(d) for d in dims)
        if self.voxel_size <= 0 or any(d <= 0 for d in self.dims):
            raise ValueError("voxel_size and dims must be positive")
        self.state = np.full(self.dims, UNKNOWN, dtype=np.uint8)
        self.loss = np.zeros(self.dims, dtype=np.float64)
        bdims = tuple((d + K.BRICK - 1) // K.BRICK for d in self.dims)
        self._brick = np.zeros(bdims, dtype=np.uint8)
        self._brick_dirty = True

    @classmethod
    def from_bounds(cls, lo, hi, voxel_size: float) -> "WorldGrid":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dims = np.maximum(1, np.ceil((hi - lo) / voxel_size - 1e-9).astype(int))
        return cls(lo, voxel_size, dims)

    # -- basic queries --------------------------------------------------------

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.array(self.dims) * self.voxel_size

    def voxel_index(self, p) -> tuple[int, int, int]:
        idx = np.floor((np.asarray(p, dtype=np.float64) - self.origin) / self.voxel_size)
        return tuple(idx.astype(int))

    def in_bounds(self, idx) -> bool:
        return all(0 <= idx[i] < self.dims[i] for i in range(3))

    def state_at(self, p) -> int:
        idx = self.voxel_index(p)
        if not self.in_bounds(idx):
            return FREE  # outside the workspace is treated as free space
        return int(self.state[idx])

    def voxel_center(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.voxel_size

    def unknown_fraction(self) -> float:
        return float(np.mean(self.state == UNKNOWN))

    def occupied_centers(self) -> np.ndarray:
        idx = np.argwhere(self.state == OCCUPIED)
        return self.origin + (idx + 0.5) * self.voxel_size

    def snapshot(self) -> "WorldGrid":
        g = WorldGrid(self.origin, self.voxel_size, self.dims)
        g.state = self.state.copy()
        g.loss = self.loss.copy()
        g._brick = self.brick_summary().copy()
        g._brick_dirty = False
        return g

    def brick_summary(self) -> np.ndarray:
        if self._brick_dirty:
            K.build_brick_summary(self.state, self._brick)
            self._brick_dirty = False
        return self._brick

    # -- updates --------------------------------------------------------------

    def integrate_depth(self, depth: np.ndarray, pose: Pose, cam: CameraModel) -> GridUpdateReport:
        """Carve free space along valid-depth rays and mark hit voxels occupied."""
        dirs = pose.ray_dirs_world(cam)
        freed, occ = K.carve_depth(np.ascontiguousarray(depth, dtype=np.float64),
                                   np.ascontiguousarray(dirs),
                                   pose.position, self.origin, self.voxel_size, self.state)
        if freed or occ:
            self._brick_dirty = True
            # cached loss is only defined on occupied voxels
            self.loss[self.state != OCCUPIED] = 0.0
        return GridUpdateReport(freed=int(freed), occupied=int(occ))

    def cache_loss(self, rgb_in: np.ndarray, depth_in: np.ndarray, render,
                   pose: Pose, cam: CameraModel, lambda_c: float,
                   beta: float = 0.3, loss_floor: float = 0.0) -> None:
        """Fold the per-pixel rendering loss into the occupied voxels it lands on.

        L = |D_render - D_in| + lambda_c * mean_channel |C_render - C_in|, averaged
        over the pixels hitting each voxel, then blended into the cache with an
        exponential moving average (factor beta). ``loss_floor`` is subtracted
        before caching (clamped at zero) so sensor-noise-level residuals can be
        treated as converged.
        """
        depth_in = np.asarray(depth_in, dtype=np.float64)
        valid = np.isfinite(depth_in) & (depth_in > 0)
        if not np.any(valid):
            return
        ldep = np.abs(render.depth - np.nan_to_num(depth_in))
        lcol = np.abs(render.color - rgb_in).mean(axis=2)
        pix_loss = (ldep + lambda_c * lcol)[valid]
        if loss_floor > 0.0:
            pix_loss = np.maximum(pix_loss - loss_floor, 0.0)
        pts = pose.position + depth_in[valid, None] * pose.ray_dirs_world(cam)[valid]
        idx = np.floor((pts - self.origin) / self.voxel_size).astype(np.int64)
        inb = np.all((idx >= 0) & (idx < np.array(self.dims)), axis=1)
        idx = idx[inb]
        pix_loss = pix_loss[inb]
        if idx.shape[0] == 0:
            return
        flat = np.ravel_multi_index((idx[:, 0], idx[:, 1], idx[:, 2]), self.dims)
        occ_mask = self.state.reshape(-1)[flat] == OCCUPIED
        flat = flat[occ_mask]
        pix_loss = pix_loss[occ_mask]
        if flat.shape[0] == 0:
            return
        order = np.argsort(flat, kind="stable")
        flat = flat[order]
        pix_loss = pix_loss[order]
        uniq, starts = np.unique(flat, return_index=True)
        sums = np.add.reduceat(pix_loss, starts)
        counts = np.diff(np.append(starts, flat.shape[0]))
        means = sums / counts
        lv = self.loss.reshape(-1)
        lv[uniq] = (1.0 - beta) * lv[uniq] + beta * means

    def reproject_loss(self, position, dirs: np.ndarray, far: float) -> np.ndarray:
        """Per-ray cached loss of the first occupied voxel within ``far`` meters.

        ``dirs`` must be unit vectors; occlusion is respected (first hit wins).
        """
        dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
        out = np.empty(dirs.shape[0], dtype=np.float64)
        K.reproject_first_hit(np.asarray(position, dtype=np.float64), dirs, float(far),
                              self.origin, self.voxel_size, self.state,
                              self.brick_summary(), self.loss, out)
        return out

    # -- reference traversal (used by tests and oracles) ----------------------

    def traverse_ray(self, start, end) -> list[tuple[int, int, int]]:
        """Exact voxel sequence from start to end by integer stepping."""
        start = np.asarray(start, dtype=np.float64)
        end = np.asarray(end, dtype=np.float64)
        d = end - start
        lo, hi = self.origin, self.upper
        t0, t1 = 0.0, 1.0
        for ax in range(3):
            if d[ax] == 0.0:
                if start[ax] < lo[ax] or start[ax] >= hi[ax]:
                    return []
            else:
                ta = (lo[ax] - start[ax]) / d[ax]
                tb = (hi[ax] - start[ax]) / d[ax]
                ta, tb = min(ta, tb), max(ta, tb)
                t0, t1 = max(t0, ta), min(t1, tb)
        if t1 <= t0:
            return []
        eps = 1e-12
        p = start + (t0 + eps) * d
        idx = np.floor((p - lo) / self.voxel_size).astype(int)
        idx = np.clip(idx, 0, np.array(self.dims) - 1)
        step = np.sign(d).astype(int)
        tmax = np.full(3, np.inf)
        tdelta = np.full(3, np.inf)
        for ax in range(3):
            if d[ax] != 0.0:
                nxt = lo[ax] + (idx[ax] + (1 if d[ax] > 0 else 0)) * self.voxel_size
                tmax[ax] = (nxt - start[ax]) / d[ax]
                tdelta[ax] = self.voxel_size / abs(d[ax])
        out = []
        t = t0
        while t < t1:
            out.append((int(idx[0]), int(idx[1]), int(idx[2])))
            ax = int(np.argmin(tmax))
            t = tmax[ax]
            if t >= t1:
                break
            idx[ax] += step[ax]
            if not (0 <= idx[ax] < self.dims[ax]):
                break
            tmax[ax] += tdelta[ax]
        return out

    def unknown_intervals(self, origin, direction, tmin: float, tmax: float) -> np.ndarray:
        """(n, 2) maximal unknown runs along a ray, as entry/exit parameters."""
        direction = np.asarray(direction, dtype=np.float64)
        span = max(tmax - tmin, 0.0)
        cap = 8 + 2 * int(span / self.voxel_size * 3.0 + 2.0)
        run_lo = np.empty(cap)
        run_hi = np.empty(cap)
        o = np.asarray(origin, dtype=np.float64)
        n = K.unknown_runs_ray(o[0], o[1], o[2], direction[0], direction[1], direction[2],
                               float(tmin), float(tmax),
                               self.origin[0], self.origin[1], self.origin[2],
                               self.voxel_size, self.state, self.brick_summary(),
                               run_lo, run_hi)
        return np.stack([run_lo[:n], run_hi[:n]], axis=1)


def save_grid(path, grid: WorldGrid) -> None:
    """Binary dump: header, run-length-encoded state, sparse loss pairs."""
    state = grid.state.reshape(-1)
    # RLE over the flattened state
    change = np.flatnonzero(np.diff(state)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [state.size]]))
    values = state[starts]
    occ_idx = np.flatnonzero(grid.loss.reshape(-1) > 0)
    occ_loss = grid.loss.reshape(-1)[occ_idx]
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<3d", *grid.origin))
        f.write(struct.pack("<d", grid.voxel_size))
        f.write(struct.pack("<3q", *grid.dims))
        f.write(struct.pack("<q", values.size))
        f.write(values.astype("<u1").tobytes())
        f.write(lengths.astype("<u4").tobytes())
        f.write(struct.pack("<q", occ_idx.size))
        f.write(occ_idx.astype("<i8").tobytes())
        f.write(occ_loss.astype("<f8").tobytes())


def load_grid(path) -> WorldGrid:
    with open(path, "rb") as f:
        if f.read(8) != GRID_MAGIC:
            raise ValueError("not a grid file")
        origin = struct.unpack("<3d", f.read(24))
        (vox,) = struct.unpack("<d", f.read(8))
        dims = struct.unpack("<3q", f.read(24))
        (nrle,) = struct.unpack("<q", f.read(8))
        values = np.frombuffer(f.read(nrle), dtype="<u1")
        lengths = np.frombuffer(f.read(4 * nrle), dtype="<u4")
        (nloss,) = struct.unpack("<q", f.read(8))
        idx = np.frombuffer(f.read(8 * nloss), dtype="<i8")
        loss = np.frombuffer(f.read(8 * nloss), dtype="<f8")
    g = WorldGrid(np.array(origin), vox, dims)
    g.state = np.repeat(values, lengths).reshape(dims).copy()
    g.loss.reshape(-1)[idx] = loss
    g._brick_dirty = True
    return g

"""Isotropic Gaussian-splat scene map: storage, spatial index, opacity queries, I/O.

The map is columnar (one numpy array per attribute) so renders and collision
checks can run vectorized over snapshots. A snapshot exposes read-only views of
the live buffers; appends never mutate rows an existing snapshot can see, so
readers stay consistent while a single writer fuses new frames.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

MAP_FORMAT_VERSION = 1
_INDEX_REBUILD_GROWTH = 1.25


class DegenerateFrameError(ValueError):
    """Raised when an observation carries too little valid depth to fuse."""


@dataclass(frozen=True)
class Gaussian:
    """A single isotropic splat: center (m), radius (m), RGB color in [0,1], opacity in (0,1]."""

    center: np.ndarray
    radius: float
    color: np.ndarray
    opacity: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64))
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not (0.0 < self.opacity <= 1.0):
            raise ValueError("opacity must lie in (0, 1]")
        if np.any(self.color < 0.0) or np.any(self.color > 1.0):
            raise ValueError("color components must lie in [0, 1]")


def opacity_at(g: Gaussian, x) -> float:
    """Opacity of splat ``g`` evaluated at point ``x``: o * exp(-|x-mu|^2 / (2 r^2))."""
    d2 = float(np.sum((np.asarray(x, dtype=np.float64) - g.center) ** 2))
    return float(g.opacity * np.exp(-d2 / (2.0 * g.radius ** 2)))


def opacity_at_points(centers: np.ndarray, radii: np.ndarray, opacities: np.ndarray,
                      pts: np.ndarray) -> np.ndarray:
    """(P, N) opacity of each of N splats at each of P points."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    d2 = np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    return opacities[None, :] * np.exp(-d2 / (2.0 * radii[None, :] ** 2))


@dataclass(frozen=True)
class MapSnapshot:
    """Immutable view of the map at a point in time; safe for concurrent reads."""

    centers: np.ndarray   # (N, 3)
    radii: np.ndarray     # (N,)
    colors: np.ndarray    # (N, 3)
    opacities: np.ndarray  # (N,)

    def __len__(self) -> int:
        return self.centers.shape[0]


class _CellIndex:
    """Uniform-cell hash from cell coordinate to splat ids (by center)."""

    def __init__(self, cell_size: float):
        self.cell_size = float(cell_size)
        self.cells: dict[tuple[int, int, int], list[int]] = {}

    def key(self, p) -> tuple[int, int, int]:
        return tuple(int(np.floor(c / self.cell_size)) for c in p)

    def insert(self, idx: int, center) -> None:
        self.cells.setdefault(self.key(center), []).append(idx)


class SplatMap:
    """Growable collection of isotropic Gaussians with AABB queries.

    Thread contract: one writer at a time (guarded by an internal lock);
    any number of readers may hold snapshots taken before or during a write.
    """

    def __init__(self, initial_capacity: int = 1024):
        cap = max(int(initial_capacity), 16)
        self._centers = np.empty((cap, 3), dtype=np.float64)
        self._radii = np.empty(cap, dtype=np.float64)
        self._colors = np.empty((cap, 3), dtype=np.float64)
        self._opacities = np.empty(cap, dtype=np.float64)
        self._count = 0
        self._index: _CellIndex | None = None
        self._index_count = 0
        self._write_lock = threading.Lock()

    def __len__(self) -> int:
        return self._count

    @property
    def max_radius(self) -> float:
        if self._count == 0:
            return 0.0
        return float(self._radii[: self._count].max())

    def _grow(self, extra: int) -> None:
        need = self._count + extra
        cap = self._centers.shape[0]
        if need <= cap:
            return
        new_cap = max(need, cap * 2)
        for name in ("_centers", "_radii", "_colors", "_opacities"):
            old = getattr(self, name)
            shape = (new_cap,) + old.shape[1:]
            buf = np.empty(shape, dtype=old.dtype)
            buf[: self._count] = old[: self._count]
            setattr(self, name, buf)
        # old snapshots keep referencing the previous buffers, which stay valid
        self._index = None

    def add(self, g: Gaussian) -> int:
        with self._write_lock:
            self._grow(1)
            i = self._count
            self._centers[i] = g.center
            self._radii[i] = g.radius
            self._colors[i] = g.color
            self._opacities[i] = g.opacity
            self._count += 1
            if self._index is not None:
                self._index.insert(i, g.center)
                self._index_count += 1
            return i

    def add_batch(self, centers, radii, colors, opacities) -> np.ndarray:
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        radii = np.atleast_1d(np.asarray(radii, dtype=np.float64))
        colors = np.atleast_2d(np.asarray(colors, dtype=np.float64))
        opacities = np.atleast_1d(np.asarray(opacities, dtype=np.float64))
        if np.any(radii <= 0):
            raise ValueError("radius must be positive")
        if np.any(opacities <= 0) or np.any(opacities > 1):
            raise ValueError("opacity must lie in (0, 1]")
        n = centers.shape[0]
        with self._write_lock:
            self._grow(n)
            i0 = self._count
            self._centers[i0:i0 + n] = centers
            self._radii[i0:i0 + n] = radii
            self._colors[i0:i0 + n] = np.clip(colors, 0.0, 1.0)
            self._opacities[i0:i0 + n] = opacities
            self._count += n
            if self._index is not None:
                if self._count > self._index_count * _INDEX_REBUILD_GROWTH:
                    self._index = None
                else:
                    for j in range(i0, i0 + n):
                        self._index.insert(j, self._centers[j])
                    self._index_count += n
            return np.arange(i0, i0 + n)

    def get(self, idx: int) -> Gaussian:
        if not (0 <= idx < self._count):
            raise IndexError(idx)
        return Gaussian(center=self._centers[idx].copy(), radius=float(self._radii[idx]),
                        color=self._colors[idx].copy(), opacity=float(self._opacities[idx]))

    def set_colors_opacities(self, ids: np.ndarray, colors: np.ndarray,
                             opacities: np.ndarray) -> None:
        """In-place appearance update (used by post-fusion refinement)."""
        with self._write_lock:
            self._colors[ids] = np.clip(colors, 0.0, 1.0)
            self._opacities[ids] = np.clip(opacities, 1e-4, 1.0)

    def snapshot(self) -> MapSnapshot:
        n = self._count
        views = []
        for arr in (self._centers[:n], self._radii[:n], self._colors[:n], self._opacities[:n]):
            v = arr.view()
            v.flags.writeable = False
            views.append(v)
        return MapSnapshot(*views)

    # -- spatial index -------------------------------------------------------

    def _ensure_index(self) -> _CellIndex:
        if self._index is not None:
            return self._index
        n = self._count
        med = float(np.median(self._radii[:n])) if n else 0.1
        cell = max(4.0 * med, 1e-3)
        idx = _CellIndex(cell)
        for i in range(n):
            idx.insert(i, self._centers[i])
        self._index = idx
        self._index_count = n
        return idx

    def query_aabb(self, lo, hi) -> np.ndarray:
        """Ids of all splats whose center lies in [lo, hi] expanded by 3x their radius.

        May return extras near box corners; never misses. Sorted ascending.
        """
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        if np.any(lo > hi):
            raise ValueError("need lo <= hi componentwise")
        n = self._count
        if n == 0:
            return np.empty(0, dtype=np.int64)
        index = self._ensure_index()
        margin = 3.0 * self.max_radius
        cs = index.cell_size
        klo = np.floor((lo - margin) / cs).astype(int)
        khi = np.floor((hi + margin) / cs).astype(int)
        cand: list[int] = []
        for kx in range(klo[0], khi[0] + 1):
            for ky in range(klo[1], khi[1] + 1):
                for kz in range(klo[2], khi[2] + 1):
                    cand.extend(index.cells.get((kx, ky, kz), ()))
        if not cand:
            return np.empty(0, dtype=np.int64)
        ids = np.unique(np.asarray(cand, dtype=np.int64))
        c = self._centers[ids]
        r = self._radii[ids][:, None]
        keep = np.all((c >= lo - 3.0 * r) & (c <= hi + 3.0 * r), axis=1)
        return ids[keep]


def save_map_text(path, snap: MapSnapshot) -> None:
    """Columnar text format, 9 significant digits; round-trips bit-exactly."""
    with open(path, "w", encoding="ascii") as f:
        f.write(f"splatmap {MAP_FORMAT_VERSION}\n")
        f.write(f"count {len(snap)}\n")
        f.write("columns cx cy cz r red green blue o\n")
        for i in range(len(snap)):
            row = [snap.centers[i, 0], snap.centers[i, 1], snap.centers[i, 2],
                   snap.radii[i], snap.colors[i, 0], snap.colors[i, 1],
                   snap.colors[i, 2], snap.opacities[i]]
            f.write(" ".join(f"{x:.9g}" for x in row) + "\n")


def load_map_text(path) -> SplatMap:
    with open(path, "r", encoding="ascii") as f:
        header = f.readline().split()
        if len(header) != 2 or header[0] != "splatmap":
            raise ValueError("not a splatmap file")
        if int(header[1]) != MAP_FORMAT_VERSION:
            raise ValueError(f"unsupported map format version {header[1]}")
        count = int(f.readline().split()[1])
        f.readline()  # column names
        data = np.loadtxt(f, dtype=np.float64, ndmin=2) if count else np.empty((0, 8))
    if data.shape != (count, 8):
        raise ValueError("splatmap row count does not match header")
    m = SplatMap(initial_capacity=max(count, 16))
    if count:
        m.add_batch(data[:, 0:3], data[:, 3], data[:, 4:7], data[:, 7])
    return m

"""Ground-truth synthetic scenes and the virtual RGB-D sensor.

Scenes are collections of textured axis-aligned boxes and spheres inside a
bounding box. Capture does exact ray-primitive intersection per pixel (no
shading, surface albedo only), marks depth outside the sensor range invalid
(NaN), and perturbs valid depth with uniform noise. Everything is
deterministic given the rng.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from .geometry import CameraModel, Pose

SCENE_FORMAT_VERSION = 1


def _hash01(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash to [0, 1)."""
    h = (ix.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         ^ iy.astype(np.int64).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         ^ iz.astype(np.int64).astype(np.uint64) * np.uint64(0x165667B19E3779F9)
         ^ np.uint64((seed * 2654435761 + 0x27220A95) & 0xFFFFFFFFFFFFFFFF))
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(29)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


@dataclass
class Texture:
    """Procedural surface albedo; maps any surface point to an RGB in [0, 1]."""

    kind: str = "checker"  # checker | gradient | noise
    color_a: tuple = (0.9, 0.9, 0.9)
    color_b: tuple = (0.1, 0.1, 0.1)
    scale: float = 0.5
    axis: int = 2     # gradient direction
    seed: int = 0     # noise lattice seed

    def sample(self, pts: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        a = np.asarray(self.color_a, dtype=np.float64)
        b = np.asarray(self.color_b, dtype=np.float64)
        if self.kind == "checker":
            cells = np.floor((pts - lo) / self.scale).astype(np.int64)
            parity = (cells.sum(axis=1) & 1).astype(np.float64)
            return a[None, :] * (1.0 - parity[:, None]) + b[None, :] * parity[:, None]
        if self.kind == "gradient":
            span = max(hi[self.axis] - lo[self.axis], 1e-9)
            t = np.clip((pts[:, self.axis] - lo[self.axis]) / span, 0.0, 1.0)
            return a[None, :] * (1.0 - t[:, None]) + b[None, :] * t[:, None]
        if self.kind == "noise":
            q = (pts - lo) / self.scale
            q0 = np.floor(q).astype(np.int64)
            f = q - q0
            f = f * f * (3.0 - 2.0 * f)  # smoothstep
            val = np.zeros(pts.shape[0])
            for dx in (0, 1):
                for dy in (0, 1):
                    for dz in (0, 1):
                        w = ((f[:, 0] if dx else 1.0 - f[:, 0])
                             * (f[:, 1] if dy else 1.0 - f[:, 1])
                             * (f[:, 2] if dz else 1.0 - f[:, 2]))
                        val += w * _hash01(q0[:, 0] + dx, q0[:, 1] + dy, q0[:, 2] + dz,
                                           self.seed)
            return a[None, :] * (1.0 - val[:, None]) + b[None, :] * val[:, None]
        raise ValueError(f"unknown texture kind {self.kind!r}")


@dataclass
class Box:
    center: np.ndarray
    size: np.ndarray  # full extents
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.size / 2.0

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.size / 2.0

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """First positive hit parameter per ray (inf on miss), slab method."""
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (self.lo[None, :] - origin[None, :]) * inv
            t2 = (self.hi[None, :] - origin[None, :]) * inv
        tlo = np.fmin(t1, t2)
        thi = np.fmax(t1, t2)
        # parallel rays: inside slab -> (-inf, inf), outside -> no hit
        par = dirs == 0.0
        if np.any(par):
            inside = (origin[None, :] >= self.lo[None, :]) & (origin[None, :] <= self.hi[None, :])
            tlo = np.where(par & inside, -np.inf, tlo)
            thi = np.where(par & inside, np.inf, thi)
            tlo = np.where(par & ~inside, np.inf, tlo)
            thi = np.where(par & ~inside, -np.inf, thi)
        tin = tlo.max(axis=1)
        tout = thi.min(axis=1)
        hit = (tin <= tout) & (tout > 0)
        t = np.where(tin > 0, tin, tout)  # exit face when origin is inside
        return np.where(hit, t, np.inf)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=1)

    def color_at(self, pts: np.ndarray) -> np.ndarray:
        return self.texture.sample(pts, self.lo, self.hi)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.radius

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.radius

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origin[None, :] - self.center[None, :]
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * np.einsum("ij,j->i", dirs, oc[0])
        c = float(oc[0] @ oc[0]) - self.radius ** 2
        disc = b * b - 4.0 * a * c
        out = np.full(dirs.shape[0], np.inf)
        ok = disc >= 0
        if np.any(ok):
            sq = np.sqrt(disc[ok])
            t1 = (-b[ok] - sq) / (2.0 * a[ok])
            t2 = (-b[ok] + sq) / (2.0 * a[ok])
            t = np.where(t1 > 0, t1, np.where(t2 > 0, t2, np.inf))
            out[ok] = t
        return out

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.sum((pts - self.center) ** 2, axis=1) <= self.radius ** 2

    def color_at(self, pts: np.ndarray) -> np.ndarray:
        return self.texture.sample(pts, self.lo, self.hi)


@dataclass
class Scene:
    primitives: list
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray

    def __post_init__(self):
        self.bounds_lo = np.asarray(self.bounds_lo, dtype=np.float64)
        self.bounds_hi = np.asarray(self.bounds_hi, dtype=np.float64)

    def intersect_rays(self, origin: np.ndarray, dirs: np.ndarray):
        """Nearest hit over all primitives: (t, primitive index) per ray."""
        n = dirs.shape[0]
        best_t = np.full(n, np.inf)
        best_p = np.full(n, -1, dtype=np.int64)
        for i, prim in enumerate(self.primitives):
            t = prim.intersect(origin, dirs)
            closer = t < best_t
            best_t[closer] = t[closer]
            best_p[closer] = i
        return best_t, best_p

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """True where a point lies inside any primitive."""
        pts = np.atleast_2d(pts)
        out = np.zeros(pts.shape[0], dtype=bool)
        for prim in self.primitives:
            out |= prim.contains(pts)
        return out


@dataclass
class SensorModel:
    cam: CameraModel
    depth_noise_halfwidth: float = 0.02
    range_min: float = 0.5
    range_max: float = 3.0

    def __post_init__(self):
        if self.depth_noise_halfwidth < 0:
            raise ValueError("noise halfwidth must be >= 0")


def capture(scene: Scene, pose: Pose, sensor: SensorModel,
            rng: np.random.Generator | None = None):
    """One RGB-D frame: exact intersections, albedo color, range-gated noisy depth.

    Depth stores the camera-frame z of the hit (NaN outside [range_min, range_max]).
    RGB shows the hit surface regardless of depth validity; rays that miss
    everything are black.
    """
    cam = sensor.cam
    dirs = pose.ray_dirs_world(cam).reshape(-1, 3)
    t, pidx = scene.intersect_rays(pose.position, dirs)
    rgb = np.zeros((dirs.shape[0], 3))
    for i, prim in enumerate(scene.primitives):
        sel = pidx == i
        if np.any(sel):
            pts = pose.position[None, :] + t[sel, None] * dirs[sel]
            rgb[sel] = prim.color_at(pts)
    depth = t.copy()
    invalid = ~np.isfinite(depth) | (depth < sensor.range_min) | (depth > sensor.range_max)
    depth[invalid] = np.nan
    if sensor.depth_noise_halfwidth > 0.0:
        if rng is None:
            raise ValueError("rng required when depth noise is enabled")
        noise = rng.uniform(-sensor.depth_noise_halfwidth,
                            sensor.depth_noise_halfwidth, size=depth.shape)
        depth = np.where(np.isnan(depth), depth, depth + noise)
    h, w = cam.height, cam.width
    return rgb.reshape(h, w, 3), depth.reshape(h, w)


def execute(traj, capture_rate_hz: float, scene: Scene, sensor: SensorModel,
            rng: np.random.Generator | None = None):
    """Kinematic flight along a trajectory: poses sampled at the capture rate
    (endpoints inclusive) are reported exactly; yields (pose, rgb, depth)."""
    total = traj.total_time
    if total <= 0.0:
        times = [0.0]
    else:
        n = int(np.floor(total * capture_rate_hz + 1e-9))
        times = [i / capture_rate_hz for i in range(n + 1)]
        if times[-1] < total - 1e-9:
            times.append(total)
    for t in times:
        pos, yaw = traj.sample_pose(min(t, total))
        pose = Pose.from_position_yaw(pos, yaw)
        rgb, depth = capture(scene, pose, sensor, rng)
        yield pose, rgb, depth


# -- scene description files --------------------------------------------------

def _texture_to_dict(t: Texture) -> dict:
    return {"id": t.kind, "color_a": list(map(float, t.color_a)),
            "color_b": list(map(float, t.color_b)), "scale": float(t.scale),
            "axis": int(t.axis), "seed": int(t.seed)}


def _texture_from_dict(d: dict) -> Texture:
    return Texture(kind=d.get("id", "checker"),
                   color_a=tuple(d.get("color_a", (0.9, 0.9, 0.9))),
                   color_b=tuple(d.get("color_b", (0.1, 0.1, 0.1))),
                   scale=float(d.get("scale", 0.5)), axis=int(d.get("axis", 2)),
                   seed=int(d.get("seed", 0)))


def save_scene(path, scene: Scene) -> None:
    prims = []
    for p in scene.primitives:
        if isinstance(p, Box):
            prims.append({"type": "box", "center": [float(x) for x in p.center],
                          "size": [float(x) for x in p.size],
                          "texture": _texture_to_dict(p.texture)})
        elif isinstance(p, Sphere):
            prims.append({"type": "sphere", "center": [float(x) for x in p.center],
                          "radius": float(p.radius),
                          "texture": _texture_to_dict(p.texture)})
        else:
            raise TypeError(f"unknown primitive {type(p)!r}")
    doc = {"version": SCENE_FORMAT_VERSION,
           "bounds": {"lo": [float(x) for x in scene.bounds_lo],
                      "hi": [float(x) for x in scene.bounds_hi]},
           "primitives": prims}
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(doc, f, sort_keys=False)


def load_scene(path) -> Scene:
    with open(path, "r", encoding="utf-8") as f:
        doc = yaml.safe_load(f)
    if doc.get("version") != SCENE_FORMAT_VERSION:
        raise ValueError(f"unsupported scene version {doc.get('version')!r}")
    prims = []
    for d in doc["primitives"]:
        tex = _texture_from_dict(d.get("texture", {}))
        if d["type"] == "box":
            prims.append(Box(center=d["center"], size=d["size"], texture=tex))
        elif d["type"] == "sphere":
            prims.append(Sphere(center=d["center"], radius=float(d["radius"]), texture=tex))
        else:
            raise ValueError(f"unknown primitive type {d['type']!r}")
    return Scene(primitives=prims, bounds_lo=doc["bounds"]["lo"], bounds_hi=doc["bounds"]["hi"])

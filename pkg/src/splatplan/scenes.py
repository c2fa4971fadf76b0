"""Built-in synthetic scenes for missions, benchmarks, and tests.

All are closed rooms (floor, ceiling, four walls) so every sightline ends on a
textured surface within the room. Interior objects are laid out leaving the
evaluation ring and the start pose free.
"""

from __future__ import annotations

import numpy as np

from .simenv import Box, Scene, Sphere, Texture

BUILTIN_PREFIX = "builtin:"


def _room(sx: float, sy: float, sz: float, wall: float = 0.1) -> list:
    mk = Texture
    prims = [
        Box(center=(sx / 2, sy / 2, wall / 2), size=(sx, sy, wall),
            texture=mk("checker", (0.85, 0.8, 0.7), (0.35, 0.3, 0.25), scale=0.5)),
        Box(center=(sx / 2, sy / 2, sz - wall / 2), size=(sx, sy, wall),
            texture=mk("noise", (0.9, 0.9, 0.95), (0.6, 0.6, 0.7), scale=0.8, seed=11)),
        Box(center=(wall / 2, sy / 2, sz / 2), size=(wall, sy, sz),
            texture=mk("gradient", (0.75, 0.3, 0.25), (0.95, 0.85, 0.6), axis=2)),
        Box(center=(sx - wall / 2, sy / 2, sz / 2), size=(wall, sy, sz),
            texture=mk("gradient", (0.25, 0.45, 0.75), (0.8, 0.9, 0.95), axis=2)),
        Box(center=(sx / 2, wall / 2, sz / 2), size=(sx, wall, sz),
            texture=mk("checker", (0.8, 0.75, 0.4), (0.3, 0.45, 0.3), scale=0.7)),
        Box(center=(sx / 2, sy - wall / 2, sz / 2), size=(sx, wall, sz),
            texture=mk("noise", (0.85, 0.55, 0.45), (0.4, 0.25, 0.3), scale=0.6, seed=4)),
    ]
    return prims


def regression_scene() -> Scene:
    """The fixed 8 x 6 x 3 m multi-primitive mission scene."""
    prims = _room(8.0, 6.0, 3.0)
    prims += [
        Box(center=(1.6, 4.8, 1.0), size=(0.7, 0.6, 2.0),
            texture=Texture("gradient", (0.7, 0.5, 0.3), (0.95, 0.9, 0.8), axis=2)),
        Box(center=(6.4, 1.4, 0.4), size=(1.2, 0.8, 0.8),
            texture=Texture("checker", (0.9, 0.4, 0.3), (0.95, 0.9, 0.85), scale=0.2)),
        Box(center=(6.6, 4.6, 0.9), size=(0.6, 0.6, 1.8),
            texture=Texture("noise", (0.4, 0.6, 0.8), (0.8, 0.9, 0.95), scale=0.3, seed=7)),
        Box(center=(4.3, 5.5, 0.75), size=(1.0, 0.4, 1.5),
            texture=Texture("checker", (0.5, 0.8, 0.5), (0.2, 0.4, 0.2), scale=0.25)),
        Box(center=(1.4, 1.6, 0.25), size=(0.5, 0.5, 0.5),
            texture=Texture("noise", (0.9, 0.8, 0.3), (0.6, 0.4, 0.1), scale=0.2, seed=3)),
        Sphere(center=(4.6, 3.2, 0.45), radius=0.45,
               texture=Texture("gradient", (0.85, 0.3, 0.5), (0.95, 0.8, 0.9), axis=2)),
        Sphere(center=(3.4, 2.2, 0.5), radius=0.5,
               texture=Texture("checker", (0.3, 0.7, 0.75), (0.9, 0.95, 0.95), scale=0.3)),
    ]
    return Scene(primitives=prims, bounds_lo=(0.0, 0.0, 0.0), bounds_hi=(8.0, 6.0, 3.0))


def single_box_scene() -> Scene:
    """Small room with one box; quick missions and determinism checks."""
    prims = _room(4.0, 4.0, 2.5)
    prims.append(Box(center=(2.6, 2.4, 0.5), size=(0.8, 0.8, 1.0),
                     texture=Texture("checker", (0.9, 0.5, 0.2), (0.3, 0.2, 0.1), scale=0.25)))
    return Scene(primitives=prims, bounds_lo=(0.0, 0.0, 0.0), bounds_hi=(4.0, 4.0, 2.5))


def bench_scene(kind: str) -> Scene:
    """Sparse or dense clutter in a 6 x 5 x 3 m room for the benchmark mode."""
    prims = _room(6.0, 5.0, 3.0)
    if kind == "sparse":
        prims += [
            Box(center=(4.5, 1.5, 0.6), size=(0.8, 0.8, 1.2),
                texture=Texture("checker", (0.8, 0.6, 0.3), (0.4, 0.3, 0.2), scale=0.3)),
            Sphere(center=(1.8, 3.5, 0.6), radius=0.6,
                   texture=Texture("gradient", (0.4, 0.6, 0.9), (0.9, 0.95, 1.0), axis=2)),
        ]
    elif kind == "dense":
        rng = np.random.default_rng(42)
        for i in range(12):
            c = rng.uniform([0.8, 0.8, 0.0], [5.2, 4.2, 0.0])
            if rng.uniform() < 0.5:
                size = rng.uniform([0.4, 0.4, 0.6], [0.9, 0.9, 2.0])
                prims.append(Box(center=(c[0], c[1], size[2] / 2), size=size,
                                 texture=Texture("checker", tuple(rng.uniform(0.5, 1, 3)),
                                                 tuple(rng.uniform(0, 0.5, 3)),
                                                 scale=float(rng.uniform(0.15, 0.5)))))
            else:
                r = float(rng.uniform(0.25, 0.55))
                prims.append(Sphere(center=(c[0], c[1], r), radius=r,
                                    texture=Texture("noise", tuple(rng.uniform(0.5, 1, 3)),
                                                    tuple(rng.uniform(0, 0.5, 3)),
                                                    scale=float(rng.uniform(0.2, 0.5)),
                                                    seed=i)))
    else:
        raise ValueError(f"unknown bench scene kind {kind!r}")
    return Scene(primitives=prims, bounds_lo=(0.0, 0.0, 0.0), bounds_hi=(6.0, 5.0, 3.0))


def resolve_scene(name_or_path: str):
    """A scene file path, or builtin:regression / builtin:single-box / builtin:bench-sparse..."""
    from .simenv import load_scene
    if name_or_path.startswith(BUILTIN_PREFIX):
        key = name_or_path[len(BUILTIN_PREFIX):]
        builders = {"regression": regression_scene, "single-box": single_box_scene,
                    "bench-sparse": lambda: bench_scene("sparse"),
                    "bench-dense": lambda: bench_scene("dense")}
        if key not in builders:
            raise ValueError(f"unknown builtin scene {key!r}; have {sorted(builders)}")
        return builders[key]()
    return load_scene(name_or_path)

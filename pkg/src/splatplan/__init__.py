"""Active Gaussian-splat reconstruction: map, renderer, grid, planner, trajectories.

The package closes the full loop against a synthetic ground-truth scene:
capture RGB-D, fuse into an isotropic splat map, track unobserved space in a
voxel grid, score candidate viewpoints by transmittance-weighted completeness
plus reprojected rendering loss, plan the next view with a sampling tree and
a view library, and fly there on a collision-penalized minimum-jerk
trajectory.
"""

from numba import config as _numba_config

# TBB in this environment is too old for numba; prefer OpenMP, else workqueue.
_numba_config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

from .geometry import CameraModel, Pose  # noqa: E402
from .gsmap import Gaussian, MapSnapshot, SplatMap, opacity_at  # noqa: E402
from .renderer import RenderOutput, render  # noqa: E402
from .worldgrid import WorldGrid  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "CameraModel", "Pose", "Gaussian", "MapSnapshot", "SplatMap", "opacity_at",
    "RenderOutput", "render", "WorldGrid", "__version__",
]

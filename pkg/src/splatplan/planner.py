"""Sampling-based next-view planning with a persistent view library.

Each planning round re-scores the library entries near the robot, grows a
small RRT*-style tree of candidate viewpoints around the current pose,
evaluates every candidate's panoramic gain, prunes candidates below the lower
gain bound (from the tree and the library both), caches novel high-gain
candidates in the library, and finally either steps along the best tree
branch or, lacking valid tree candidates, pops the best library entry. An
empty library with no valid candidates means the reconstruction is done.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gain import GainNormalizer, InvalidViewpointError, evaluate_panorama, optimal_yaw
from .geometry import CameraModel, angle_diff
from .gsmap import MapSnapshot, opacity_at_points
from .trajopt import chance_threshold
from .worldgrid import OCCUPIED, WorldGrid


@dataclass
class ScoredViewpoint:
    position: np.ndarray
    yaw: float
    gain: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)


@dataclass
class PlannerParams:
    gain_lower_bound: float = 0.01    # candidates below this are dropped
    gain_cache_threshold: float = 0.1  # candidates above this may enter the library
    overlap_threshold: float = 0.7
    overlap_sigma_pos: float = 1.0
    dist_discount: float = 0.5        # 1/m, travel discount in branch scores
    near_radius: float = 4.0
    edge_length: float = 1.5
    sample_radius: float = 5.0
    z_band: tuple = (0.8, 2.4)
    n_samples: int = 10
    max_attempt_factor: int = 30
    rewire_factor: float = 1.5
    robot_radius: float = 0.5
    collision_step: float = 0.01
    visited_pos_tol: float = 0.5
    visited_yaw_tol: float = float(np.deg2rad(30.0))


@dataclass
class PlanResult:
    goal: ScoredViewpoint | None
    complete: bool
    source: str  # "tree" | "library" | "none"
    info: dict = field(default_factory=dict)


class ViewLibrary:
    """Unvisited candidate viewpoints with their cached gains."""

    def __init__(self):
        self.entries: list[ScoredViewpoint] = []

    def __len__(self) -> int:
        return len(self.entries)

    def near(self, position, radius: float) -> list[ScoredViewpoint]:
        position = np.asarray(position, dtype=np.float64)
        return [e for e in self.entries
                if np.linalg.norm(e.position - position) <= radius]

    def remove(self, entry: ScoredViewpoint) -> None:
        self.entries = [e for e in self.entries if e is not entry]

    def insert(self, entry: ScoredViewpoint) -> None:
        self.entries.append(entry)

    def pop_best(self, position, dist_discount: float) -> ScoredViewpoint | None:
        """Remove and return the entry maximizing gain * exp(-discount * distance)."""
        if not self.entries:
            return None
        position = np.asarray(position, dtype=np.float64)
        scores = [e.gain * np.exp(-dist_discount * np.linalg.norm(e.position - position))
                  for e in self.entries]
        best = int(np.argmax(scores))
        return self.entries.pop(best)


class SampleTree:
    """RRT* tree rooted at the current pose; costs are path lengths from root."""

    def __init__(self, root_position):
        self.positions = [np.asarray(root_position, dtype=np.float64)]
        self.parents = [-1]
        self.costs = [0.0]
        self.gains = [0.0]
        self.yaws = [0.0]
        self.valid = [False]  # root is not a candidate
        self.from_library: list[ScoredViewpoint | None] = [None]

    def __len__(self) -> int:
        return len(self.positions)

    def add(self, position, parent: int, library_entry=None) -> int:
        position = np.asarray(position, dtype=np.float64)
        self.positions.append(position)
        self.parents.append(parent)
        self.costs.append(self.costs[parent]
                          + float(np.linalg.norm(position - self.positions[parent])))
        self.gains.append(0.0)
        self.yaws.append(0.0)
        self.valid.append(False)
        self.from_library.append(library_entry)
        return len(self.positions) - 1

    def rewire_parent(self, node: int, parent: int) -> None:
        self.parents[node] = parent
        self._refresh_costs(node)

    def _refresh_costs(self, node: int) -> None:
        self.costs[node] = (self.costs[self.parents[node]]
                            + float(np.linalg.norm(self.positions[node]
                                                   - self.positions[self.parents[node]])))
        for child in range(len(self.positions)):
            if self.parents[child] == node:
                self._refresh_costs(child)

    def ancestors(self, node: int) -> list[int]:
        out = []
        while node != -1:
            out.append(node)
            node = self.parents[node]
        return out

    def first_child_of_root(self, node: int) -> int:
        chain = self.ancestors(node)
        return chain[-2] if len(chain) >= 2 else node


class CollisionChecker:
    """Clearance predicate shared by node sampling, edges, and the test oracle.

    A point collides when any splat's opacity there reaches its chance
    threshold, or when an occupied voxel center lies within the robot radius.
    Candidates are prefiltered by exact point-to-segment distance against each
    splat's maximum influence reach, which never changes the predicate's
    outcome. Optional exclusion bubbles (the robot's own stand-point) pass
    unconditionally.
    """

    def __init__(self, snap: MapSnapshot, grid: WorldGrid, robot_radius: float,
                 free_bubbles=()):
        self.snap = snap
        self.grid = grid
        self.robot_radius = robot_radius
        self._c_thr = chance_threshold(snap.radii, robot_radius) if len(snap) else np.zeros(0)
        self._reach = (3.0 * snap.radii + robot_radius) if len(snap) else np.zeros(0)
        self._occ = grid.occupied_centers()
        self.free_bubbles = [(np.asarray(c, dtype=np.float64), float(r))
                             for c, r in free_bubbles]

    @staticmethod
    def _seg_dist2(points: np.ndarray, a: np.ndarray, ab: np.ndarray, l2: float):
        if l2 < 1e-18:
            d = points - a[None, :]
            return np.sum(d * d, axis=1)
        t = np.clip((points - a[None, :]) @ ab / l2, 0.0, 1.0)
        d = points - (a[None, :] + t[:, None] * ab[None, :])
        return np.sum(d * d, axis=1)

    def _segment_test(self, a: np.ndarray, b: np.ndarray, pts: np.ndarray) -> bool:
        """True when all sampled points of segment [a, b] are clear."""
        ab = b - a
        l2 = float(ab @ ab)
        if self.free_bubbles:
            keep = np.ones(pts.shape[0], dtype=bool)
            for c, r in self.free_bubbles:
                keep &= np.sum((pts - c[None, :]) ** 2, axis=1) > r * r
            pts = pts[keep]
            if pts.shape[0] == 0:
                return True
        if len(self.snap):
            d2 = self._seg_dist2(self.snap.centers, a, ab, l2)
            ids = np.flatnonzero(d2 <= self._reach ** 2)
            if ids.size:
                alpha = opacity_at_points(self.snap.centers[ids], self.snap.radii[ids],
                                          self.snap.opacities[ids], pts)
                if np.any(alpha >= self._c_thr[ids][None, :]):
                    return False
        if self._occ.shape[0]:
            d2 = self._seg_dist2(self._occ, a, ab, l2)
            occ = self._occ[d2 <= self.robot_radius ** 2]
            if occ.shape[0]:
                d2p = np.sum((pts[:, None, :] - occ[None, :, :]) ** 2, axis=2)
                if np.any(d2p <= self.robot_radius ** 2):
                    return False
        return True

    def point_free(self, p) -> bool:
        p = np.asarray(p, dtype=np.float64)
        return self._segment_test(p, p, p[None, :])

    def edge_free(self, a, b, step: float) -> bool:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        n = max(2, int(np.ceil(np.linalg.norm(b - a) / step)) + 1)
        ts = np.linspace(0.0, 1.0, n)
        pts = a[None, :] + ts[:, None] * (b - a)[None, :]
        return self._segment_test(a, b, pts)


def overlap(v: ScoredViewpoint, others) -> float:
    """Similarity in [0, 1] to the closest of ``others`` in pose space.

    s = exp(-|dp|^2 / (2 sigma^2)) * max(0, cos(dyaw)); 0 for an empty set.
    """
    return overlap_with(v, others, sigma_pos=1.0)


def overlap_with(v: ScoredViewpoint, others, sigma_pos: float = 1.0) -> float:
    best = 0.0
    for u in others:
        dp2 = float(np.sum((v.position - u.position) ** 2))
        s = np.exp(-dp2 / (2.0 * sigma_pos ** 2)) * max(0.0, np.cos(v.yaw - u.yaw))
        best = max(best, s)
    return best


def branch_score(tree: SampleTree, node: int, dist_discount: float) -> float:
    """Sum of discounted gains along the branch from the root to ``node``."""
    total = 0.0
    for a in tree.ancestors(node):
        if tree.valid[a]:
            total += tree.gains[a] * np.exp(-dist_discount * tree.costs[a])
    return total


def sample_viewpoints(current_position, v_near, checker: CollisionChecker,
                      grid: WorldGrid, params: PlannerParams,
                      rng: np.random.Generator) -> SampleTree:
    """Grow the candidate tree: uniform disk samples steered onto collision-free
    edges with RRT* rewiring, then attach nearby library entries."""
    tree = SampleTree(current_position)
    cur = np.asarray(current_position, dtype=np.float64)
    lo_z, hi_z = params.z_band
    glo = grid.origin
    ghi = grid.upper
    attempts = 0
    max_attempts = params.n_samples * params.max_attempt_factor
    accepted = 0
    while accepted < params.n_samples and attempts < max_attempts:
        attempts += 1
        ang = rng.uniform(0.0, 2.0 * np.pi)
        rad = params.sample_radius * np.sqrt(rng.uniform())
        z = rng.uniform(lo_z, hi_z)
        sample = np.array([cur[0] + rad * np.cos(ang), cur[1] + rad * np.sin(ang), z])
        if np.any(sample < glo) or np.any(sample >= ghi):
            continue
        if grid.state_at(sample) == OCCUPIED:
            continue
        dists = [float(np.linalg.norm(sample - p)) for p in tree.positions]
        nearest = int(np.argmin(dists))
        d = dists[nearest]
        if d < 1e-6:
            continue
        if d > params.edge_length:
            sample = tree.positions[nearest] + (sample - tree.positions[nearest]) * (
                params.edge_length / d)
            if grid.state_at(sample) == OCCUPIED:
                continue
        if not checker.point_free(sample):
            continue
        # choose-parent among neighbors, then standard rewire
        r_neigh = params.rewire_factor * params.edge_length
        neigh = [i for i, p in enumerate(tree.positions)
                 if np.linalg.norm(sample - p) <= r_neigh]
        neigh.sort(key=lambda i: tree.costs[i] + float(np.linalg.norm(sample - tree.positions[i])))
        parent = -1
        for i in neigh:
            if checker.edge_free(tree.positions[i], sample, params.collision_step):
                parent = i
                break
        if parent < 0:
            continue
        node = tree.add(sample, parent)
        accepted += 1
        for i in neigh:
            if i == parent or i == 0:
                continue
            new_cost = tree.costs[node] + float(np.linalg.norm(sample - tree.positions[i]))
            if new_cost + 1e-12 < tree.costs[i] and checker.edge_free(
                    sample, tree.positions[i], params.collision_step):
                tree.rewire_parent(i, node)
    for entry in v_near:
        order = np.argsort([np.linalg.norm(entry.position - p) for p in tree.positions],
                           kind="stable")
        for i in order:
            if checker.edge_free(tree.positions[int(i)], entry.position,
                                 params.collision_step):
                tree.add(entry.position, int(i), library_entry=entry)
                break
    return tree


class ViewPlanner:
    """Owns the view library, visited poses, and the gain normalizer."""

    def __init__(self, params: PlannerParams, gain_cam: CameraModel,
                 n_bins: int = 72, lambda_q: float = 0.5):
        self.params = params
        self.gain_cam = gain_cam
        self.n_bins = n_bins
        self.lambda_q = lambda_q
        self.library = ViewLibrary()
        self.visited: list[tuple[np.ndarray, float]] = []
        self.normalizer = GainNormalizer()

    def mark_visited(self, position, yaw: float) -> None:
        self.visited.append((np.asarray(position, dtype=np.float64), float(yaw)))

    def _near_visited(self, position, yaw: float) -> bool:
        for p, y in self.visited:
            if (np.linalg.norm(position - p) <= self.params.visited_pos_tol
                    and abs(angle_diff(yaw, y)) <= self.params.visited_yaw_tol):
                return True
        return False

    def _evaluate(self, snap, grid, position):
        pano = evaluate_panorama(snap, grid, position, self.gain_cam,
                                 lambda_q=self.lambda_q, n_bins=self.n_bins,
                                 normalizer=self.normalizer)
        yaw, gain = optimal_yaw(pano, self.gain_cam.hfov)
        return yaw, gain

    def plan_next(self, current_position, current_yaw: float, snap: MapSnapshot,
                  grid: WorldGrid, rng: np.random.Generator) -> PlanResult:
        p = self.params
        cur = np.asarray(current_position, dtype=np.float64)
        info: dict = {"evaluated": 0}

        # refresh gains of nearby library entries with the current snapshots
        v_near = self.library.near(cur, p.near_radius)
        for entry in v_near:
            try:
                entry.yaw, entry.gain = self._evaluate(snap, grid, entry.position)
                info["evaluated"] += 1
            except InvalidViewpointError:
                entry.gain = -1.0

        # the robot's own stand-point is free by construction, even if newly
        # fused splats now violate clearance there
        checker = CollisionChecker(snap, grid, p.robot_radius,
                                   free_bubbles=[(cur, 0.35)])
        tree = sample_viewpoints(cur, v_near, checker, grid, p, rng)
        info["sampled_nodes"] = len(tree) - 1

        # score fresh candidates (library entries were just re-evaluated)
        for i in range(1, len(tree)):
            entry = tree.from_library[i]
            if entry is None:
                try:
                    tree.yaws[i], tree.gains[i] = self._evaluate(snap, grid, tree.positions[i])
                    info["evaluated"] += 1
                except InvalidViewpointError:
                    tree.gains[i] = -1.0
            else:
                tree.yaws[i] = entry.yaw
                tree.gains[i] = entry.gain
            tree.valid[i] = tree.gains[i] >= p.gain_lower_bound

        # prune: below-bound candidates leave both the tree and the library
        for i in range(1, len(tree)):
            if not tree.valid[i] and tree.from_library[i] is not None:
                self.library.remove(tree.from_library[i])
        for entry in v_near:
            if entry.gain < p.gain_lower_bound:
                self.library.remove(entry)

        # cache novel high-gain candidates
        inserted: list[ScoredViewpoint] = []
        for i in range(1, len(tree)):
            if tree.from_library[i] is not None or not tree.valid[i]:
                continue
            cand = ScoredViewpoint(tree.positions[i].copy(), tree.yaws[i], tree.gains[i])
            if cand.gain <= p.gain_cache_threshold:
                continue
            if self._near_visited(cand.position, cand.yaw):
                continue
            against = self.library.near(cand.position, p.near_radius) + inserted
            if overlap_with(cand, against, p.overlap_sigma_pos) < p.overlap_threshold:
                self.library.insert(cand)
                inserted.append(cand)
        info["library_size"] = len(self.library)
        info["gains"] = [round(float(g), 6) for g in tree.gains[1:]]

        valid_nodes = [i for i in range(1, len(tree)) if tree.valid[i]]
        if valid_nodes:
            scores = [branch_score(tree, i, p.dist_discount) for i in valid_nodes]
            best_node = valid_nodes[int(np.argmax(scores))]
            goal_node = tree.first_child_of_root(best_node)
            goal = ScoredViewpoint(tree.positions[goal_node].copy(),
                                   tree.yaws[goal_node], tree.gains[goal_node])
            # the goal is being committed to; it must not linger as unvisited
            if tree.from_library[goal_node] is not None:
                self.library.remove(tree.from_library[goal_node])
            return PlanResult(goal=goal, complete=False, source="tree", info=info)
        popped = self.library.pop_best(cur, p.dist_discount)
        if popped is not None:
            return PlanResult(goal=popped, complete=False, source="library", info=info)
        return PlanResult(goal=None, complete=True, source="none", info=info)

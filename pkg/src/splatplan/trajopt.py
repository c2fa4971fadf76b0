"""Smooth trajectory generation in (x, y, z, yaw) flat-output space.

Trajectories are piecewise quintic polynomials, uniquely determined as the
minimum-jerk interpolant of boundary states and interior waypoints (C^4 at
junctions). Waypoints and segment durations are optimized jointly with L-BFGS
on an unconstrained transcription: durations live in log space, and velocity,
acceleration, yaw-rate, and splat-collision constraints enter as smooth cubic
hinge penalties sampled along the trajectory. Gradients are analytic, using
the adjoint of the banded interpolation system.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import minimize

from .geometry import angle_diff
from .gsmap import MapSnapshot, SplatMap

_PERM = np.zeros((6, 6))  # _PERM[order, k] = k!/(k-order)!
for _k in range(6):
    for _o in range(6):
        if _k >= _o:
            _PERM[_o, _k] = np.prod(np.arange(_k - _o + 1, _k + 1)) if _o else 1.0


def _dbasis(t: float, order: int) -> np.ndarray:
    """Row of d^order/dt^order [1, t, ..., t^5] evaluated at t."""
    row = np.zeros(6)
    for k in range(order, 6):
        row[k] = _PERM[order, k] * t ** (k - order)
    return row


def _dbasis_many(ts: np.ndarray, order: int) -> np.ndarray:
    """(S, 6) stacked derivative basis rows."""
    out = np.zeros((ts.size, 6))
    for k in range(order, 6):
        out[:, k] = _PERM[order, k] * ts ** (k - order)
    return out


@dataclass
class Trajectory:
    """Piecewise quintic in the four flat outputs; coeffs[j, k, d] multiplies t^k."""

    coeffs: np.ndarray     # (M, 6, 4)
    durations: np.ndarray  # (M,)

    @property
    def n_segments(self) -> int:
        return self.coeffs.shape[0]

    @property
    def total_time(self) -> float:
        return float(self.durations.sum())

    def _locate(self, t: float) -> tuple[int, float]:
        t = min(max(t, 0.0), self.total_time)
        acc = 0.0
        for j in range(self.n_segments):
            if t <= acc + self.durations[j] or j == self.n_segments - 1:
                return j, t - acc
            acc += self.durations[j]
        return self.n_segments - 1, self.durations[-1]

    def eval(self, t: float, order: int = 0) -> np.ndarray:
        """(4,) flat output (or its time derivative) at mission time t."""
        j, tl = self._locate(t)
        return _dbasis(tl, order) @ self.coeffs[j]

    def sample_pose(self, t: float) -> tuple[np.ndarray, float]:
        z = self.eval(t, 0)
        return z[:3], float(z[3])

    def sample_states(self, ts) -> dict:
        ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
        pos = np.empty((ts.size, 4))
        vel = np.empty((ts.size, 4))
        acc = np.empty((ts.size, 4))
        for i, t in enumerate(ts):
            pos[i] = self.eval(t, 0)
            vel[i] = self.eval(t, 1)
            acc[i] = self.eval(t, 2)
        return {"t": ts, "pos": pos, "vel": vel, "acc": acc}


def construct_min_jerk(waypoints: np.ndarray, durations: np.ndarray,
                       start_state: np.ndarray, end_state: np.ndarray) -> Trajectory:
    """Minimum-jerk piecewise quintic through interior waypoints.

    waypoints: (M-1, 4) interior flat-output targets (may be empty for M=1).
    durations: (M,) positive segment times.
    start_state/end_state: (3, 4) position, velocity, acceleration rows.
    """
    durations = np.atleast_1d(np.asarray(durations, dtype=np.float64))
    if np.any(durations <= 0):
        raise ValueError("segment durations must be positive")
    waypoints = np.asarray(waypoints, dtype=np.float64).reshape(-1, 4)
    m = durations.size
    if waypoints.shape[0] != m - 1:
        raise ValueError(f"expected {m - 1} interior waypoints, got {waypoints.shape[0]}")
    a, b = _assemble_system(waypoints, durations,
                            np.asarray(start_state, dtype=np.float64),
                            np.asarray(end_state, dtype=np.float64))
    coeffs = np.linalg.solve(a, b)
    return Trajectory(coeffs=coeffs.reshape(m, 6, 4), durations=durations.copy())


def _assemble_system(waypoints, durations, start_state, end_state):
    m = durations.size
    n = 6 * m
    a = np.zeros((n, n))
    b = np.zeros((n, 4))
    a[0, 0] = 1.0
    a[1, 1] = 1.0
    a[2, 2] = 2.0
    b[0:3] = start_state
    for j in range(m - 1):
        base = 3 + 6 * j
        tj = durations[j]
        a[base + 0, 6 * j:6 * j + 6] = _dbasis(tj, 0)
        b[base + 0] = waypoints[j]
        a[base + 1, 6 * (j + 1)] = 1.0
        b[base + 1] = waypoints[j]
        for o in range(1, 5):
            a[base + 1 + o, 6 * j:6 * j + 6] = _dbasis(tj, o)
            a[base + 1 + o, 6 * (j + 1) + o] = -_PERM[o, o]
    base = 3 + 6 * (m - 1)
    tm = durations[-1]
    for o in range(3):
        a[base + o, 6 * (m - 1):6 * m] = _dbasis(tm, o)
    b[base:base + 3] = end_state
    return a, b


# -- safety cost ---------------------------------------------------------------

def chance_threshold(radii, robot_radius: float):
    """Per-splat opacity bound: the unit-opacity falloff at 3r + R_robot from the mean."""
    radii = np.asarray(radii, dtype=np.float64)
    return np.exp(-((3.0 * radii + robot_radius) ** 2) / (2.0 * radii ** 2))


def safety_radius(radius: float, opacity: float, robot_radius: float) -> float:
    """Clearance R_s at which the splat's opacity falls to its chance threshold."""
    cthr = float(chance_threshold(radius, robot_radius))
    if opacity <= cthr:
        return 0.0
    return radius * np.sqrt(2.0 * np.log(opacity / cthr))


@dataclass
class ConstraintSplats:
    centers: np.ndarray  # (K, 3)
    radii: np.ndarray
    opacities: np.ndarray
    c_thr: np.ndarray

    def __len__(self) -> int:
        return self.centers.shape[0]

    @classmethod
    def empty(cls) -> "ConstraintSplats":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def from_map(cls, snap_or_map, ids=None, robot_radius: float = 0.5) -> "ConstraintSplats":
        if isinstance(snap_or_map, SplatMap):
            snap = snap_or_map.snapshot()
        else:
            snap = snap_or_map
        if ids is None:
            ids = np.arange(len(snap))
        c = snap.centers[ids]
        r = snap.radii[ids]
        o = snap.opacities[ids]
        return cls(c.copy(), r.copy(), o.copy(), chance_threshold(r, robot_radius))


def select_constraint_splats(splat_map: SplatMap, traj: Trajectory,
                             robot_radius: float, horizon: float = 1.0,
                             n_probe: int = 32) -> ConstraintSplats:
    """Splats near the first ``horizon`` seconds of a trajectory, by AABB query."""
    if len(splat_map) == 0:
        return ConstraintSplats.empty()
    t_hi = min(horizon, traj.total_time)
    ts = np.linspace(0.0, max(t_hi, 1e-9), n_probe)
    pts = np.stack([traj.eval(t, 0)[:3] for t in ts])
    pad = 3.0 * splat_map.max_radius + robot_radius
    lo = pts.min(axis=0) - pad
    hi = pts.max(axis=0) + pad
    ids = splat_map.query_aabb(lo, hi)
    return ConstraintSplats.from_map(splat_map, ids, robot_radius)


def safety_cost(p, splats: ConstraintSplats) -> tuple[float, np.ndarray]:
    """Cubic-hinge collision cost at a point and its gradient.

    cost = sum_i max(alpha_i(p) - c_thr_i, 0)^3 with alpha_i the splat opacity
    at p; grad follows by the chain rule through the Gaussian falloff.
    """
    p = np.asarray(p, dtype=np.float64)
    if len(splats) == 0:
        return 0.0, np.zeros(3)
    diff = splats.centers - p[None, :]
    d2 = np.sum(diff * diff, axis=1)
    alpha = splats.opacities * np.exp(-d2 / (2.0 * splats.radii ** 2))
    h = np.maximum(alpha - splats.c_thr, 0.0)
    cost = float(np.sum(h ** 3))
    coef = 3.0 * h * h * alpha / splats.radii ** 2
    grad = coef @ diff
    return cost, grad


# -- penalty-based optimization -------------------------------------------------

@dataclass
class Limits:
    v_max: float = 1.0
    a_max: float = 2.0
    yaw_rate_max: float = float(np.pi)


@dataclass
class TrajOptParams:
    rho: float = 20.0
    w_vel: float = 1e7
    w_acc: float = 1e7
    w_yaw: float = 1e7
    w_collision: float = 1e13
    kappa: int = 16            # penalty samples per segment
    max_iterations: int = 300
    gtol: float = 1e-6
    robot_radius: float = 0.5
    segment_length: float = 1.0
    cruise_fraction: float = 0.7
    time_dilation: bool = True
    log_t_bounds: tuple = (np.log(0.02), np.log(60.0))


@dataclass
class OptReport:
    cost: float
    iterations: int
    converged: bool
    violations: dict = field(default_factory=dict)

    @property
    def max_violation(self) -> float:
        return max(self.violations.values()) if self.violations else 0.0


class _Objective:
    """J = jerk integral + rho * T + integrated hinge penalties, with gradient."""

    def __init__(self, start_state, end_state, m, limits: Limits,
                 params: TrajOptParams, splats: ConstraintSplats):
        self.start_state = start_state
        self.end_state = end_state
        self.m = m
        self.limits = limits
        self.params = params
        self.splats = splats

    def unpack(self, x):
        m = self.m
        q = x[: 4 * (m - 1)].reshape(m - 1, 4)
        tdur = np.exp(x[4 * (m - 1):])
        return q, tdur

    def __call__(self, x):
        q, tdur = self.unpack(x)
        m = self.m
        p = self.params
        a, b = _assemble_system(q, tdur, self.start_state, self.end_state)
        lu = lu_factor(a)
        coef = lu_solve(lu, b)                     # (6m, 4)
        cc = coef.reshape(m, 6, 4)
        g_c = np.zeros_like(coef)
        g_t = np.full(m, p.rho)
        cost = p.rho * float(tdur.sum())

        # jerk energy, per segment and dim
        for j in range(m):
            t = tdur[j]
            c3 = cc[j, 3]
            c4 = cc[j, 4]
            c5 = cc[j, 5]
            cost += float(np.sum(36 * c3 ** 2 * t + 144 * c3 * c4 * t ** 2
                                 + (192 * c4 ** 2 + 240 * c3 * c5) * t ** 3
                                 + 720 * c4 * c5 * t ** 4 + 720 * c5 ** 2 * t ** 5))
            g = g_c.reshape(m, 6, 4)
            g[j, 3] += 72 * c3 * t + 144 * c4 * t ** 2 + 240 * c5 * t ** 3
            g[j, 4] += 144 * c3 * t ** 2 + 384 * c4 * t ** 3 + 720 * c5 * t ** 4
            g[j, 5] += 240 * c3 * t ** 3 + 720 * c4 * t ** 4 + 1440 * c5 * t ** 5
            g_t[j] += float(np.sum(36 * c3 ** 2 + 288 * c3 * c4 * t
                                   + (576 * c4 ** 2 + 720 * c3 * c5) * t ** 2
                                   + 2880 * c4 * c5 * t ** 3 + 3600 * c5 ** 2 * t ** 4))

        cost += self._penalties(cc, tdur, g_c.reshape(m, 6, 4), g_t)

        # adjoint pass: dJ/db and the duration correction through A(T)
        lam = lu_solve(lu, g_c, trans=1)           # solves A^T lam = g_c
        grad_q = np.zeros((m - 1, 4))
        for j in range(m - 1):
            base = 3 + 6 * j
            grad_q[j] = lam[base + 0] + lam[base + 1]
        for j in range(m):
            t = tdur[j]
            corr = 0.0
            if j < m - 1:
                base = 3 + 6 * j
                for o in range(5):
                    row = base + (0 if o == 0 else o + 1)
                    corr += float(lam[row] @ (_dbasis(t, o + 1) @ cc[j]))
            else:
                base = 3 + 6 * (m - 1)
                for o in range(3):
                    corr += float(lam[base + o] @ (_dbasis(t, o + 1) @ cc[j]))
            g_t[j] -= corr
        grad = np.concatenate([grad_q.ravel(), g_t * tdur])  # chain T = exp(tau)
        return cost, grad

    def _penalties(self, cc, tdur, g_c, g_t) -> float:
        p = self.params
        lim = self.limits
        kappa = p.kappa
        splats = self.splats
        total = 0.0
        for j in range(self.m):
            t = tdur[j]
            ts = np.arange(kappa + 1) * (t / kappa)
            wts = np.full(kappa + 1, t / kappa)
            wts[0] *= 0.5
            wts[-1] *= 0.5
            b0 = _dbasis_many(ts, 0)  # (S, 6)
            b1 = _dbasis_many(ts, 1)
            b2 = _dbasis_many(ts, 2)
            b3 = _dbasis_many(ts, 3)
            pos = b0 @ cc[j]
            vel = b1 @ cc[j]
            acc = b2 @ cc[j]
            jrk = b3 @ cc[j]
            s = kappa + 1
            gpos = np.zeros((s, 4))
            gvel = np.zeros((s, 4))
            gacc = np.zeros((s, 4))
            gval = np.zeros(s)

            xv = np.sum(vel[:, :3] ** 2, axis=1) - lim.v_max ** 2
            hv = np.maximum(xv, 0.0)
            gval += p.w_vel * hv ** 3
            gvel[:, :3] += (p.w_vel * 3.0 * hv ** 2 * 2.0)[:, None] * vel[:, :3]

            xa = np.sum(acc[:, :3] ** 2, axis=1) - lim.a_max ** 2
            ha = np.maximum(xa, 0.0)
            gval += p.w_acc * ha ** 3
            gacc[:, :3] += (p.w_acc * 3.0 * ha ** 2 * 2.0)[:, None] * acc[:, :3]

            xy = vel[:, 3] ** 2 - lim.yaw_rate_max ** 2
            hy = np.maximum(xy, 0.0)
            gval += p.w_yaw * hy ** 3
            gvel[:, 3] += p.w_yaw * 3.0 * hy ** 2 * 2.0 * vel[:, 3]

            if len(splats):
                diff = splats.centers[None, :, :] - pos[:, None, :3]   # (S, K, 3)
                d2 = np.sum(diff * diff, axis=2)
                alpha = splats.opacities[None, :] * np.exp(-d2 / (2.0 * splats.radii[None, :] ** 2))
                h = np.maximum(alpha - splats.c_thr[None, :], 0.0)
                gval += p.w_collision * np.sum(h ** 3, axis=1)
                coefs = 3.0 * h * h * alpha / splats.radii[None, :] ** 2
                gpos[:, :3] += p.w_collision * np.einsum("sk,skd->sd", coefs, diff)

            total += float(wts @ gval)
            # coefficient gradient: sum_i w_i (gpos b0 + gvel b1 + gacc b2)
            g_c[j] += (b0.T @ (wts[:, None] * gpos)
                       + b1.T @ (wts[:, None] * gvel)
                       + b2.T @ (wts[:, None] * gacc))
            # duration gradient: quadrature weights scale with T and samples move
            dgdt = (np.sum(gpos * vel, axis=1) + np.sum(gvel * acc, axis=1)
                    + np.sum(gacc * jrk, axis=1))
            g_t[j] += float(wts @ gval) / t
            g_t[j] += float(wts @ (dgdt * (np.arange(kappa + 1) / kappa)))
        return total


def initial_guess(start_state, end_state, params: TrajOptParams, limits: Limits):
    """Straight-line waypoints with a trapezoidal-profile time allocation."""
    p0 = start_state[0, :3]
    p1 = end_state[0, :3]
    dist = float(np.linalg.norm(p1 - p0))
    m = max(1, int(np.ceil(dist / params.segment_length)))
    vc = params.cruise_fraction * limits.v_max
    if dist < vc ** 2 / limits.a_max:
        t_total = 2.0 * np.sqrt(max(dist, 1e-6) / limits.a_max)
    else:
        t_total = dist / vc + vc / limits.a_max
    dyaw = end_state[0, 3] - start_state[0, 3]
    t_total = max(t_total, abs(dyaw) / (params.cruise_fraction * limits.yaw_rate_max), 0.3)
    if m > 1:
        fracs = (np.arange(1, m) / m)[:, None]
        waypoints = np.hstack([
            p0[None, :] + (p1 - p0)[None, :] * fracs,
            start_state[0, 3] + dyaw * fracs,
        ])
        # small deterministic lateral offsets: a guess threading a splat center
        # exactly is a saddle of the radially symmetric collision cost
        u = p1 - p0
        un = np.linalg.norm(u)
        if un > 1e-9:
            u = u / un
            ref = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
            v1 = np.cross(u, ref)
            v1 /= np.linalg.norm(v1)
            v2 = np.cross(u, v1)
            ks = np.arange(1, m)[:, None]
            waypoints[:, :3] += 0.02 * (np.sin(2.4 * ks) * v1[None, :]
                                        + np.cos(2.4 * ks) * v2[None, :])
    else:
        waypoints = np.zeros((0, 4))
    durations = np.full(m, t_total / m)
    return waypoints, durations


def optimize(start_state, end_state, splats: ConstraintSplats,
             limits: Limits | None = None, params: TrajOptParams | None = None,
             waypoints=None, durations=None) -> tuple[Trajectory, OptReport]:
    """Jointly optimize interior waypoints and segment durations.

    start_state/end_state: (3, 4) arrays of [position; velocity; acceleration]
    rows over (x, y, z, yaw). Returns the trajectory and a report with the
    final cost, iteration count, and max sampled violation per constraint in
    natural units. Non-convergence is reported, never raised.
    """
    limits = limits or Limits()
    params = params or TrajOptParams()
    start_state = np.asarray(start_state, dtype=np.float64)
    end_state = np.asarray(end_state, dtype=np.float64)
    if waypoints is None or durations is None:
        waypoints, durations = initial_guess(start_state, end_state, params, limits)
    else:
        waypoints = np.asarray(waypoints, dtype=np.float64).reshape(-1, 4)
        durations = np.asarray(durations, dtype=np.float64)
    if np.any(durations <= 0):
        raise ValueError("initial durations must be positive")
    m = durations.size
    obj = _Objective(start_state, end_state, m, limits, params, splats)
    x0 = np.concatenate([waypoints.ravel(), np.log(durations)])
    nq = 4 * (m - 1)
    bounds = [(None, None)] * nq + [params.log_t_bounds] * m
    res = minimize(obj, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": params.max_iterations, "gtol": params.gtol,
                            "ftol": 1e-14, "maxls": 60})
    q, tdur = obj.unpack(res.x)
    traj = construct_min_jerk(q, tdur, start_state, end_state)
    if params.time_dilation:
        traj = _dilate_to_limits(traj, start_state, end_state, q, limits)
    violations = measure_violations(traj, limits, splats)
    # non-convergence means the iteration cap left a real constraint violation
    ok = bool(res.success) or max(violations.values()) <= 1e-3
    report = OptReport(cost=float(res.fun), iterations=int(res.nit),
                       converged=ok, violations=violations)
    return traj, report


def _dilate_to_limits(traj: Trajectory, start_state, end_state, waypoints,
                      limits: Limits) -> Trajectory:
    """Uniform time scaling to scrub residual dynamic-limit violations.

    Only valid for rest-to-rest boundary states (scaling preserves them); the
    spatial path is unchanged, so collision terms are unaffected.
    """
    if np.any(np.abs(start_state[1:]) > 1e-9) or np.any(np.abs(end_state[1:]) > 1e-9):
        return traj
    st = traj.sample_states(np.linspace(0.0, traj.total_time, 64 * traj.n_segments + 1))
    sv = np.max(np.linalg.norm(st["vel"][:, :3], axis=1)) / limits.v_max
    sa = np.sqrt(np.max(np.linalg.norm(st["acc"][:, :3], axis=1)) / limits.a_max)
    sy = np.max(np.abs(st["vel"][:, 3])) / limits.yaw_rate_max
    s = max(1.0, sv, sa, sy) * (1.0 + 1e-9)
    if s <= 1.0 + 1e-12:
        return traj
    return construct_min_jerk(waypoints, traj.durations * s, start_state, end_state)


def measure_violations(traj: Trajectory, limits: Limits, splats: ConstraintSplats,
                       samples_per_segment: int = 100) -> dict:
    """Max sampled violation of each constraint in its natural units."""
    ts = np.linspace(0.0, traj.total_time, samples_per_segment * traj.n_segments + 1)
    st = traj.sample_states(ts)
    speed = np.linalg.norm(st["vel"][:, :3], axis=1)
    amag = np.linalg.norm(st["acc"][:, :3], axis=1)
    yr = np.abs(st["vel"][:, 3])
    out = {
        "velocity": float(np.maximum(speed - limits.v_max, 0.0).max()),
        "acceleration": float(np.maximum(amag - limits.a_max, 0.0).max()),
        "yaw_rate": float(np.maximum(yr - limits.yaw_rate_max, 0.0).max()),
    }
    if len(splats):
        diff = splats.centers[None, :, :] - st["pos"][:, None, :3]
        d2 = np.sum(diff * diff, axis=2)
        alpha = splats.opacities[None, :] * np.exp(-d2 / (2.0 * splats.radii[None, :] ** 2))
        out["collision"] = float(np.maximum(alpha - splats.c_thr[None, :], 0.0).max())
    else:
        out["collision"] = 0.0
    return out


def rest_state(position, yaw: float) -> np.ndarray:
    """(3, 4) boundary state at rest: given pose, zero velocity/acceleration."""
    st = np.zeros((3, 4))
    st[0, :3] = np.asarray(position, dtype=np.float64)
    st[0, 3] = yaw
    return st


def goal_state_from(start_yaw: float, position, yaw: float) -> np.ndarray:
    """Rest goal state with yaw unwrapped to the shortest turn from start_yaw."""
    st = rest_state(position, start_yaw + angle_diff(yaw, start_yaw))
    return st


def export_trajectory_csv(path, traj: Trajectory, rate_hz: float = 100.0) -> None:
    n = max(1, int(np.floor(traj.total_time * rate_hz + 1e-9)))
    ts = np.arange(n + 1) / rate_hz
    ts = np.minimum(ts, traj.total_time)
    st = traj.sample_states(ts)
    with open(path, "w", newline="", encoding="ascii") as f:
        wr = csv.writer(f)
        wr.writerow(["t", "x", "y", "z", "yaw", "vx", "vy", "vz", "yaw_rate"])
        for i in range(ts.size):
            wr.writerow([f"{ts[i]:.6f}"]
                        + [f"{v:.9g}" for v in st["pos"][i]]
                        + [f"{v:.9g}" for v in st["vel"][i]])

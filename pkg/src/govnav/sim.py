"""Closed-loop simulation of the robot-governor stack.

One control step: scan, fuse the scan into the grid, (periodically)
replan, evaluate the free energy from the current peak bound and the
grid distance, project the goal into the safe zone, move the governor,
regulate the feedback-linearized plant toward it, and integrate the
disturbed nonlinear dynamics at the physics rate. Traces record every
step; identical scenario and seed give bit-identical traces.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path as FilePath
from typing import Optional

import numpy as np

from .bounds import (
    BoundMethod,
    LyapBoundOracle,
    RelaxedLinearSystem,
    build_relaxed_system,
    peak_bound_lyap,
    peak_bound_sdp,
)
from .errors import Diverged, PoseInObstacle, ScenarioError
from .governor import (
    AugmentedState,
    GovernorParams,
    Path,
    SafeZone,
    free_energy,
    governor_control,
    in_goal_region,
    project_goal,
)
from .linearization import (
    AckermannParams,
    NonlinearPlant,
    ackermann_plant,
    brunovsky_realization,
    bw_norm_bound,
    feedback_linearize,
    gains_from_poles,
)
from .numkit import SymMatrix
from .world import GroundTruthMap, LidarSpec, OccupancyGrid, dist_to_obstacles, plan_path, raycast, update_grid

__all__ = [
    "DisturbanceKind",
    "DisturbanceModel",
    "Scenario",
    "Trace",
    "step_plant",
    "run_closed_loop",
    "monte_carlo_peak",
]

TRACE_SCHEMA = 1


class DisturbanceKind(str, Enum):
    ZERO = "zero"
    PIECEWISE_CONSTANT_EXTREMAL = "extremal"
    PIECEWISE_CONSTANT_UNIFORM = "uniform"


@dataclass(frozen=True)
class DisturbanceModel:
    """Piecewise-constant bounded input noise, ||w|| <= delta_w exactly."""

    kind: DisturbanceKind = DisturbanceKind.PIECEWISE_CONSTANT_EXTREMAL
    hold_s: float = 0.1
    delta_w: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.hold_s <= 0:
            raise ValueError("hold time must be positive")
        if self.delta_w < 0:
            raise ValueError("magnitude bound must be nonnegative")

    def sampler(self, dim: int, seed: Optional[int] = None) -> "_DisturbanceSampler":
        return _DisturbanceSampler(self, dim, self.seed if seed is None else seed)


class _DisturbanceSampler:
    """Deterministic hold-and-sample stream for one run."""

    def __init__(self, model: DisturbanceModel, dim: int, seed: int):
        self.model = model
        self.dim = dim
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, dim]))
        self.next_switch = 0.0
        self.value = np.zeros(dim)

    def at(self, t: float) -> np.ndarray:
        while t >= self.next_switch - 1e-12:
            self.value = _draw_disturbance(self.rng, self.model, self.dim)
            self.next_switch += self.model.hold_s
        return self.value


def _draw_disturbance(rng, model: DisturbanceModel, dim: int) -> np.ndarray:
    if model.kind is DisturbanceKind.ZERO:
        return np.zeros(dim)
    direction = rng.standard_normal(dim)
    norm = np.linalg.norm(direction)
    if norm < 1e-12:
        direction = np.zeros(dim)
        direction[0] = 1.0
        norm = 1.0
    direction /= norm
    if model.kind is DisturbanceKind.PIECEWISE_CONSTANT_EXTREMAL:
        return model.delta_w * direction
    return model.delta_w * rng.uniform(0.0, 1.0) * direction


def step_plant(plant: NonlinearPlant, x: np.ndarray, u: np.ndarray, w: np.ndarray,
               dt: float):
    """One RK4 step of xdot = f(x) + G(x)(u + w) with held u and w.

    Returns (next_state, clamp_reason) where the optional reason names the
    state clamp (speed floor / steering limit) applied after the step.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    uw = np.asarray(u, dtype=float) + np.asarray(w, dtype=float)

    def f(xv):
        return plant.drift(xv) + plant.input_matrix(xv) @ uw

    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    x_next = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise Diverged("plant state became non-finite")
    reason = None
    if plant.clamp_state is not None:
        x_next, reason = plant.clamp_state(x_next)
    return x_next, reason


@dataclass
class Scenario:
    """Declarative description of one closed-loop run."""

    gt_map: GroundTruthMap
    ackermann: AckermannParams
    initial_state: np.ndarray
    goal: np.ndarray
    chain_poles: tuple
    k_g: float
    delta_w: float
    s_out: SymMatrix
    eps_e: float = 0.05
    bound_method: BoundMethod = BoundMethod.LYAP
    lidar: LidarSpec = field(default_factory=LidarSpec)
    dt_s: float = 0.001
    control_period_s: float = 0.02
    replan_period_s: float = 0.5
    horizon_s: float = 60.0
    seed: int = 0
    disturbance_kind: DisturbanceKind = DisturbanceKind.PIECEWISE_CONSTANT_EXTREMAL
    disturbance_hold_s: float = 0.1
    grid_resolution_m: float = 0.25
    inflation_radius_m: Optional[float] = None
    robot_radius_m: float = 0.0
    governor_start: Optional[np.ndarray] = None
    terminate_on_goal: bool = True
    log_sdp_bound: bool = False
    name: str = "scenario"

    def __post_init__(self):
        self.initial_state = np.asarray(self.initial_state, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        if self.governor_start is not None:
            self.governor_start = np.asarray(self.governor_start, dtype=float)

    def validate(self) -> None:
        """Check every static invariant; raises ScenarioError on the first failure."""
        if not (0 < self.dt_s <= self.control_period_s <= self.replan_period_s):
            raise ScenarioError("need dt <= control period <= replan period")
        if self.k_g * self.control_period_s >= 1.0:
            raise ScenarioError("governor gain times control period must stay below 1")
        if self.horizon_s <= 0:
            raise ScenarioError("horizon must be positive")
        if self.delta_w <= 0:
            raise ScenarioError("disturbance bound must be positive")
        if self.initial_state.shape != (6,):
            raise ScenarioError("initial state must have 6 components")
        if self.goal.shape != (2,):
            raise ScenarioError("goal must be a 2-D point")
        if self.gt_map.contains_obstacle(self.initial_state[:2]):
            raise ScenarioError("initial position is not in free space")
        if self.gt_map.contains_obstacle(self.goal):
            raise ScenarioError("goal is not in free space")
        if self.initial_state[4] < self.ackermann.v_min_mps:
            raise ScenarioError("initial speed is below the controller's speed floor")
        try:
            self.build_system()
        except Exception as exc:
            raise ScenarioError(f"cannot build the closed loop: {exc}") from exc

    def build_system(self):
        plant = ackermann_plant(self.ackermann)
        real = brunovsky_realization(plant.relative_degree)
        gains = gains_from_poles(real, self.chain_poles)
        gamma = bw_norm_bound(plant, self.ackermann)
        sys = build_relaxed_system(real, gains, gamma, self.delta_w, self.s_out)
        return plant, real, gains, sys


@dataclass
class Trace:
    """Closed-loop record: one row per control step plus run metadata."""

    meta: dict
    rows: list

    @property
    def status(self) -> str:
        return self.meta["status"]

    def chain_violations(self, tol: float = 1e-6) -> int:
        """Steps where the governor moved but the safety chain failed."""
        count = 0
        for r in self.rows:
            if not r["governor_moved"]:
                continue
            if r["dist_sq_g_y"] > r["bound"] + tol:
                count += 1
            elif r["bound"] + r["eps_e"] > r["dist_sq_g_obs"] + tol:
                count += 1
        return count

    def to_ndjson(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"schema": TRACE_SCHEMA, **self.meta}) + "\n")
            for row in self.rows:
                fh.write(json.dumps(row) + "\n")

    def to_csv(self, path) -> None:
        if not self.rows:
            raise ValueError("empty trace")
        flat_rows = [_flatten_row(r) for r in self.rows]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(flat_rows[0].keys()))
            writer.writeheader()
            writer.writerows(flat_rows)

    @classmethod
    def from_ndjson(cls, path) -> "Trace":
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("schema") != TRACE_SCHEMA:
                raise ValueError(f"unsupported trace schema {header.get('schema')}")
            rows = [json.loads(line) for line in fh if line.strip()]
        meta = {k: v for k, v in header.items() if k != "schema"}
        return cls(meta, rows)


def _flatten_row(row: dict) -> dict:
    out = {}
    for k, v in row.items():
        if isinstance(v, list):
            for i, vi in enumerate(v):
                out[f"{k}_{i}"] = vi
        else:
            out[k] = v
    return out


def run_closed_loop(scenario: Scenario) -> Trace:
    """Run the full stack and return the trace.

    Raises ScenarioError when the start state fails the static safety
    precondition, PlanningFailed when no initial path exists, Diverged or
    PoseInObstacle on simulation failures (a collision is always an error,
    never a logged event).
    """
    scenario.validate()
    plant, real, gains, sys = scenario.build_system()
    s_out = scenario.s_out
    t_mat = real.t
    c_bar = sys.c_bar
    ref_map = t_mat.T @ c_bar.T  # governor reference in chain coordinates
    gov = GovernorParams(scenario.k_g, scenario.eps_e, s_out, scenario.bound_method)

    oracle = LyapBoundOracle(sys) if scenario.bound_method is BoundMethod.LYAP else None
    bound_exact = peak_bound_sdp if scenario.bound_method is BoundMethod.SDP else peak_bound_lyap
    delta_ult = bound_exact(sys, np.zeros(sys.state_dim)).delta
    lam_min = float(np.linalg.eigvalsh(s_out.entries)[0])
    lam_max_inv = 1.0 / lam_min
    goal_eps = delta_ult / lam_min

    inflation = scenario.inflation_radius_m
    if inflation is None:
        inflation = math.sqrt((delta_ult + scenario.eps_e) * lam_max_inv) + scenario.robot_radius_m

    x = scenario.initial_state.copy()
    y = plant.output(x)
    g = y.copy() if scenario.governor_start is None else scenario.governor_start.copy()
    grid = OccupancyGrid.unknown_for(scenario.gt_map, scenario.grid_resolution_m)

    def scan_from(xv):
        pose = (xv[0], xv[1], xv[2])
        scan = raycast(scenario.gt_map, pose, scenario.lidar)
        update_grid(grid, pose, scan, max_range=scenario.lidar.max_range_m)

    scan_from(x)

    # static safety precondition at t0
    shift0 = t_mat @ plant.coordinate_map(x) - c_bar.T @ g
    bound0 = bound_exact(sys, shift0).delta
    d0 = dist_to_obstacles(grid, g, s_out, max_range=scenario.lidar.max_range_m)
    if bound0 > d0 * d0:
        raise ScenarioError(
            f"initial state violates the static safety condition: "
            f"bound {bound0:.4f} exceeds squared clearance {d0 * d0:.4f}"
        )

    path = plan_path(grid, g, scenario.goal, inflation)
    sigma = 0.0

    sampler = DisturbanceModel(
        scenario.disturbance_kind, scenario.disturbance_hold_s, scenario.delta_w,
        scenario.seed,
    ).sampler(plant.input_dim)

    n_steps = int(round(scenario.horizon_s / scenario.control_period_s))
    n_sub = max(int(round(scenario.control_period_s / scenario.dt_s)), 1)
    dt = scenario.control_period_s / n_sub
    replan_every = max(int(round(scenario.replan_period_s / scenario.control_period_s)), 1)

    rows = []
    status = "horizon"
    l_wb = scenario.ackermann.wheelbase_m

    for k in range(n_steps):
        t = k * scenario.control_period_s
        if scenario.gt_map.contains_obstacle(y):
            raise PoseInObstacle(f"collision at t={t:.3f}s, y={y.tolist()}")
        if k > 0:
            scan_from(x)
        replanned = False
        if scenario.k_g > 0.0 and k > 0 and k % replan_every == 0:
            try:
                path = plan_path(grid, g, scenario.goal, inflation)
                sigma = 0.0
                replanned = True
            except Exception:
                pass  # keep the previous path; the governor may stall

        z = plant.coordinate_map(x)
        z_tilde = t_mat @ z
        shift = z_tilde - c_bar.T @ g
        d_obs = dist_to_obstacles(grid, g, s_out, max_range=scenario.lidar.max_range_m)
        dist_sq_obs = d_obs * d_obs
        state = AugmentedState(z_tilde, g)
        delta_e = free_energy(state, dist_sq_obs, sys, gov, oracle=oracle)
        zone = SafeZone(g, delta_e, s_out)
        g_bar, sigma = project_goal(zone, path, sigma)
        stalled = delta_e <= 0.0 or not zone.contains(path.point_at(sigma))

        bound_sdp_val = None
        if scenario.log_sdp_bound:
            bound_sdp_val = peak_bound_sdp(sys, shift).delta

        u_g = governor_control(g, g_bar, gov)
        governor_moved = bool(np.linalg.norm(u_g) > 0.0)
        dy = y - g
        dist_sq_g_y = float(dy @ s_out.entries @ dy)
        bound_val = dist_sq_obs - scenario.eps_e - delta_e
        x_pre = x.copy()

        g = g + scenario.control_period_s * u_g
        v_cmd = -gains.k @ (z - ref_map @ g)
        u = feedback_linearize(plant, x, v_cmd)

        envelope = x[4] ** 2 / (l_wb * math.cos(x[3]) ** 2) > scenario.ackermann.beta + 1e-12
        clamped = False
        for i_sub in range(n_sub):
            w = sampler.at(t + i_sub * dt)
            x, clamp_reason = step_plant(plant, x, u, w, dt)
            clamped = clamped or clamp_reason is not None
        y = plant.output(x)

        rows.append({
            "t": round(t, 9),
            "x": [float(v) for v in x_pre],
            "y": [float(v) for v in plant.output(x_pre)],
            "g": [float(v) for v in state.g],
            "g_bar": [float(v) for v in g_bar],
            "sigma": float(sigma),
            "delta_e": float(delta_e),
            "bound": float(bound_val),
            "bound_sdp": None if bound_sdp_val is None else float(bound_sdp_val),
            "dist_sq_g_obs": float(dist_sq_obs),
            "dist_sq_g_y": float(dist_sq_g_y),
            "eps_e": float(scenario.eps_e),
            "governor_moved": governor_moved,
            "stalled": bool(stalled),
            "envelope_violation": bool(envelope),
            "singular_clamp": bool(clamped),
            "replanned": bool(replanned),
        })

        if scenario.terminate_on_goal and in_goal_region(y, path, goal_eps, s_out):
            status = "goal"
            break

    meta = {
        "scenario": scenario.name,
        "seed": scenario.seed,
        "status": status,
        "delta_ultimate": float(delta_ult),
        "goal_eps": float(goal_eps),
        "inflation_radius_m": float(inflation),
        "bound_method": scenario.bound_method.value,
        "steps": len(rows),
        "t_end": round(len(rows) * scenario.control_period_s, 9),
        "final_y": [float(v) for v in y],
        "path_end": [float(v) for v in path.end],
    }
    return Trace(meta, rows)


def monte_carlo_peak(sys: RelaxedLinearSystem, z0, n_trials: int, horizon_s: float,
                     model: DisturbanceModel, substep_s: float = 0.0125,
                     per_trial: bool = False):
    """Sampled peak of ||y(t)||_S^2 for the relaxed linear system.

    Integrates exactly (matrix exponential per substep) under
    piecewise-constant disturbance draws; each trial owns an RNG stream
    derived from (model.seed, trial index), so the result is reproducible
    and independent of trial batching. With per_trial=True the whole
    per-trial peak vector comes back instead of its maximum.
    """
    from scipy.linalg import expm

    if n_trials < 1:
        raise ValueError("need at least one trial")
    z0 = np.asarray(z0, dtype=float)
    n, m = sys.state_dim, sys.output_dim
    n_holds = max(int(math.ceil(horizon_s / model.hold_s)), 1)
    n_sub = max(int(round(model.hold_s / substep_s)), 1)
    dt = model.hold_s / n_sub

    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = sys.a_bar * dt
    aug[:n, n:] = sys.b_bar * dt
    ed = expm(aug)
    e_mat, f_mat = ed[:n, :n], ed[:n, n:]

    draws = np.empty((n_trials, n_holds, m))
    for i in range(n_trials):
        rng = np.random.default_rng(np.random.SeedSequence([model.seed, i]))
        for h in range(n_holds):
            draws[i, h] = _draw_disturbance(rng, model, m)

    s_mat = sys.s_out.entries
    c_bar = sys.c_bar
    z = np.tile(z0[:, None], (1, n_trials))
    y = c_bar @ z
    peak = np.einsum("ki,ij,kj->k", y.T, s_mat, y.T)
    for h in range(n_holds):
        w = draws[:, h, :].T  # (m, trials)
        fw = f_mat @ w
        for _ in range(n_sub):
            z = e_mat @ z + fw
            y = c_bar @ z
            np.maximum(peak, np.einsum("ki,ij,kj->k", y.T, s_mat, y.T), out=peak)
    if per_trial:
        return peak
    return float(np.max(peak))

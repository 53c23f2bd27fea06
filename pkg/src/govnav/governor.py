"""Reference-governor layer: free energy, safe zone, path projection.

The governor is a virtual first-order system g_dot = u_g whose position
acts as the robot's moving equilibrium. Its free energy

    dE = d_S^2(g, obstacles) - peak_bound(ztilde - Cbar^T g) - eps_E

budgets how far the tracking target may be placed: the local safe zone is
the S-ellipse of squared radius max(0, dE) around g, and the governor
chases the furthest path point inside that zone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bounds import (
    BoundMethod,
    LyapBoundOracle,
    RelaxedLinearSystem,
    peak_bound_lyap,
    peak_bound_sdp,
)
from .numkit import SymMatrix

__all__ = [
    "Path",
    "GovernorParams",
    "AugmentedState",
    "SafeZone",
    "free_energy",
    "project_goal",
    "governor_control",
    "is_safe_state",
    "in_goal_region",
    "check_path_clearance",
]


@dataclass(frozen=True)
class Path:
    """Piecewise-linear 2-D path with arc-length parameterization on [0, 1]."""

    waypoints: np.ndarray

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.waypoints, dtype=float))
        if w.shape[0] < 1 or w.shape[1] != 2:
            raise ValueError("path needs at least one 2-D waypoint")
        object.__setattr__(self, "waypoints", w)
        seg = np.diff(w, axis=0)
        lengths = np.hypot(seg[:, 0], seg[:, 1]) if len(seg) else np.zeros(0)
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        object.__setattr__(self, "_cum", cum)
        object.__setattr__(self, "length", float(cum[-1]))

    @property
    def start(self) -> np.ndarray:
        return self.waypoints[0]

    @property
    def end(self) -> np.ndarray:
        return self.waypoints[-1]

    def point_at(self, sigma: float) -> np.ndarray:
        """Evaluate the path at normalized arc length sigma in [0, 1]."""
        sigma = min(max(float(sigma), 0.0), 1.0)
        if self.length == 0.0:
            return self.waypoints[0].copy()
        target = sigma * self.length
        cum = self._cum
        i = int(np.searchsorted(cum, target, side="right") - 1)
        i = min(i, len(self.waypoints) - 2)
        seg_len = cum[i + 1] - cum[i]
        tau = 0.0 if seg_len == 0.0 else (target - cum[i]) / seg_len
        return (1.0 - tau) * self.waypoints[i] + tau * self.waypoints[i + 1]

    def segment_sigmas(self) -> np.ndarray:
        """Normalized arc length of every waypoint."""
        if self.length == 0.0:
            return np.zeros(len(self.waypoints))
        return self._cum / self.length


@dataclass(frozen=True)
class GovernorParams:
    """Governor gain, energy margin and the shared output norm."""

    k_g: float
    eps_e: float
    s_out: SymMatrix
    bound_method: BoundMethod = BoundMethod.LYAP

    def __post_init__(self):
        if self.k_g < 0:
            raise ValueError("governor gain must be nonnegative")
        if self.eps_e <= 0:
            raise ValueError("energy margin must be positive")


@dataclass(frozen=True)
class AugmentedState:
    """Reordered robot state and governor position."""

    z_tilde: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z_tilde", np.asarray(self.z_tilde, dtype=float))
        object.__setattr__(self, "g", np.asarray(self.g, dtype=float))


@dataclass(frozen=True)
class SafeZone:
    """S-ellipse {q : ||q - g||_S^2 <= radius_sq} of squared radius max(0, dE)."""

    center: np.ndarray
    radius_sq: float
    metric: SymMatrix

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "radius_sq", max(0.0, float(self.radius_sq)))

    def contains(self, q: np.ndarray) -> bool:
        d = np.asarray(q, dtype=float) - self.center
        return float(d @ self.metric.entries @ d) <= self.radius_sq


def _peak_bound_value(sys: RelaxedLinearSystem, shift: np.ndarray,
                      method: BoundMethod,
                      oracle: Optional[LyapBoundOracle]) -> float:
    if oracle is not None and method is BoundMethod.LYAP:
        return oracle.bound(shift)[0]
    if method is BoundMethod.SDP:
        return peak_bound_sdp(sys, shift).delta
    return peak_bound_lyap(sys, shift).delta


def free_energy(s: AugmentedState, dist_sq_to_obstacles: float,
                sys: RelaxedLinearSystem, p: GovernorParams,
                oracle: Optional[LyapBoundOracle] = None) -> float:
    """Leeway to safety violation at the augmented state s.

    `dist_sq_to_obstacles` is the squared S-distance from the governor to
    the obstacle set. `oracle` short-circuits the Lyapunov bound with a
    precomputed decay-rate grid (used by the control loop).
    """
    if dist_sq_to_obstacles < 0:
        raise ValueError("squared distance must be nonnegative")
    shift = s.z_tilde - sys.c_bar.T @ s.g
    bound = _peak_bound_value(sys, shift, p.bound_method, oracle)
    return float(dist_sq_to_obstacles - bound - p.eps_e)


def _zone_interval_max(zone: SafeZone, a: np.ndarray, b: np.ndarray,
                       tau_lo: float) -> Optional[float]:
    """Largest tau in [tau_lo, 1] with the segment point inside the zone."""
    s = zone.metric.entries
    e = a - zone.center
    d = b - a
    c2 = float(d @ s @ d)
    c1 = 2.0 * float(e @ s @ d)
    c0 = float(e @ s @ e) - zone.radius_sq
    if c2 <= 1e-300:
        return 1.0 if c0 <= 0.0 else None
    disc = c1 * c1 - 4.0 * c2 * c0
    if disc < 0.0:
        return None
    root = math.sqrt(disc)
    lo = (-c1 - root) / (2.0 * c2)
    hi = (-c1 + root) / (2.0 * c2)
    lo, hi = max(lo, tau_lo), min(hi, 1.0)
    if lo > hi:
        return None
    return hi


def project_goal(zone: SafeZone, path: Path, sigma_prev: float = 0.0):
    """Furthest path point inside the safe zone, never behind sigma_prev.

    Walks the segments from sigma_prev forward and solves the
    segment-ellipse intersection analytically. Returns (g_bar, sigma);
    when no path point at or beyond sigma_prev lies in the zone (zone
    degenerate, or the path left it), the governor holds position:
    (zone.center, sigma_prev).
    """
    sigma_prev = min(max(float(sigma_prev), 0.0), 1.0)
    if path.length == 0.0:
        if zone.contains(path.waypoints[0]):
            return path.waypoints[0].copy(), 1.0
        return zone.center.copy(), sigma_prev
    sigmas = path.segment_sigmas()
    first = max(int(np.searchsorted(sigmas, sigma_prev, side="right")) - 1, 0)
    first = min(first, len(path.waypoints) - 2)
    best_sigma = None
    for i in range(first, len(path.waypoints) - 1):
        lo_sigma, hi_sigma = sigmas[i], sigmas[i + 1]
        if hi_sigma <= lo_sigma:
            continue
        tau_lo = 0.0
        if sigma_prev > lo_sigma:
            tau_lo = (sigma_prev - lo_sigma) / (hi_sigma - lo_sigma)
            if tau_lo > 1.0:
                continue
        tau = _zone_interval_max(zone, path.waypoints[i], path.waypoints[i + 1], tau_lo)
        if tau is not None:
            best_sigma = lo_sigma + tau * (hi_sigma - lo_sigma)
    if best_sigma is None:
        return zone.center.copy(), sigma_prev
    best_sigma = min(best_sigma, 1.0)
    return path.point_at(best_sigma), best_sigma


def governor_control(g: np.ndarray, g_bar: np.ndarray, p: GovernorParams) -> np.ndarray:
    """First-order tracking law u_g = -k_g (g - g_bar)."""
    return -p.k_g * (np.asarray(g, dtype=float) - np.asarray(g_bar, dtype=float))


def is_safe_state(s: AugmentedState, delta_e: float, path: Path, zone: SafeZone) -> bool:
    """Strictly positive free energy and a path point inside the zone."""
    if delta_e <= 0.0:
        return False
    if path.length == 0.0:
        return zone.contains(path.waypoints[0])
    sigmas = path.segment_sigmas()
    for i in range(len(path.waypoints) - 1):
        if _zone_interval_max(zone, path.waypoints[i], path.waypoints[i + 1], 0.0) is not None:
            return True
    return False


def in_goal_region(y: np.ndarray, path: Path, eps: float, s_out: SymMatrix) -> bool:
    """Squared S-distance of the output to the path end is at most eps."""
    if eps < 0:
        raise ValueError("goal tolerance must be nonnegative")
    d = np.asarray(y, dtype=float) - path.end
    return float(d @ s_out.entries @ d) <= eps


def check_path_clearance(path: Path, world, sys: RelaxedLinearSystem, eps_e: float,
                         delta_ult: Optional[float] = None,
                         method: BoundMethod = BoundMethod.LYAP,
                         step_m: Optional[float] = None,
                         max_range: Optional[float] = None) -> bool:
    """Whether the whole path keeps the S-clearance required for safe tracking.

    Checks min_sigma d_S(r(sigma), obstacles) > sqrt(lambda_min(S) *
    (delta_ult + eps_e)) on a dense sigma grid (default step: half a grid
    cell). `world` is an occupancy grid or a ground-truth map.
    """
    from . import world as world_mod

    if delta_ult is None:
        bound_fn = peak_bound_sdp if method is BoundMethod.SDP else peak_bound_lyap
        delta_ult = bound_fn(sys, np.zeros(sys.state_dim)).delta
    lam_min = float(np.linalg.eigvalsh(sys.s_out.entries)[0])
    threshold = math.sqrt(lam_min * (delta_ult + eps_e))
    if step_m is None:
        step_m = getattr(world, "resolution", 0.1) / 2.0
    n_samples = max(int(math.ceil(path.length / step_m)) + 1, 2)
    for sigma in np.linspace(0.0, 1.0, n_samples):
        q = path.point_at(sigma)
        d = world_mod.dist_to_obstacles(world, q, sys.s_out, max_range=max_range)
        if d <= threshold:
            return False
    return True

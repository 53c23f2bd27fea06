"""Certified peak-output bounds for the disturbed closed loop.

The reordered closed-loop system

    ztilde_dot = Abar ztilde + Bbar wbar,   y = Cbar ztilde,  ||wbar|| <= 1

has Bbar = col(0, gamma*delta_w*I) and Cbar = [I, 0]. Two routes produce a
certified bound delta on the weighted output peak ||y(t)||_S^2 over all
admissible disturbances and t >= t0:

* the SDP route: for each decay rate alpha, minimize delta subject to the
  invariant-ellipsoid matrix inequality, the output-gain inequality and
  the initial-condition constraint, then minimize over alpha;
* the Lyapunov route: for each alpha solve
  Abar Q + Q Abar^T + alpha Q + (1/alpha) Bbar Bbar^T = 0 and evaluate the
  closed-form bound, then minimize over alpha.

The Lyapunov route is cheaper and never tighter than the SDP route.
Both searches run on the open interval (0, alpha_bar) where
alpha_bar = -2 max Re spec(Abar).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import Infeasible, NoFeasiblePoint, NotHurwitz, NumericalFailure
from .linearization import BrunovskyRealization, LinearFeedbackGains
from .numkit import (
    FEAS_TOL,
    LmiProblem,
    ScalarBracket,
    SymMatrix,
    VarSpec,
    _Block,
    flatten_values,
    minimize_scalar,
    solve_lmi,
    solve_lyapunov,
    spectral_abscissa,
    sym_eig,
)

__all__ = [
    "RelaxedLinearSystem",
    "Ellipsoid",
    "PeakBound",
    "BoundMethod",
    "build_relaxed_system",
    "invariant_ellipsoid_check",
    "peak_bound_sdp",
    "peak_bound_lyap",
    "ellipsoid_contains",
    "LyapBoundOracle",
]

# shrink factor for the open search interval (0, alpha_bar)
BRACKET_EDGE = 1e-6


class BoundMethod(str, Enum):
    SDP = "sdp"
    LYAP = "lyap"


@dataclass(frozen=True)
class RelaxedLinearSystem:
    """The reordered disturbed closed loop with unit-norm disturbance."""

    a_bar: np.ndarray
    gamma: float
    delta_w: float
    s_out: SymMatrix

    def __post_init__(self):
        a = np.asarray(self.a_bar, dtype=float)
        object.__setattr__(self, "a_bar", a)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("a_bar must be square")
        if self.s_out.dim > a.shape[0]:
            raise ValueError("output dimension exceeds state dimension")
        if self.gamma <= 0 or self.delta_w <= 0:
            raise ValueError("gamma and delta_w must be positive")
        if not self.s_out.is_positive_definite:
            raise ValueError("output norm matrix must be positive definite")
        if spectral_abscissa(a) >= 0.0:
            raise NotHurwitz("relaxed system matrix is not Hurwitz")

    @property
    def state_dim(self) -> int:
        return self.a_bar.shape[0]

    @property
    def output_dim(self) -> int:
        return self.s_out.dim

    @property
    def b_bar(self) -> np.ndarray:
        n, m = self.state_dim, self.output_dim
        return np.vstack([np.zeros((n - m, m)), self.gamma * self.delta_w * np.eye(m)])

    @property
    def c_bar(self) -> np.ndarray:
        n, m = self.state_dim, self.output_dim
        return np.hstack([np.eye(m), np.zeros((m, n - m))])

    @property
    def alpha_bar(self) -> float:
        return -2.0 * spectral_abscissa(self.a_bar)

    @property
    def sqrt_s(self) -> np.ndarray:
        return self.s_out.sqrt().entries

    def output_quad_norm(self, y: np.ndarray) -> float:
        y = np.asarray(y, dtype=float)
        return float(y @ self.s_out.entries @ y)


@dataclass(frozen=True)
class Ellipsoid:
    """The set {q : (q - p)^T P (q - p) <= 1}."""

    shape: SymMatrix
    center: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        object.__setattr__(self, "center", c)
        if c.shape != (self.shape.dim,):
            raise ValueError("center dimension must match the shape matrix")
        if not self.shape.is_positive_definite:
            raise ValueError("ellipsoid shape matrix must be positive definite")


def ellipsoid_contains(e: Ellipsoid, q: np.ndarray) -> bool:
    d = np.asarray(q, dtype=float) - e.center
    return float(d @ e.shape.entries @ d) <= 1.0


@dataclass(frozen=True)
class PeakBound:
    """A certified bound on ||y(t)||_S^2 with its certificate."""

    delta: float
    alpha_star: float
    method: BoundMethod
    certificate: SymMatrix
    initial_state: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "initial_state",
                           np.asarray(self.initial_state, dtype=float))
        if self.delta < 0:
            raise ValueError("peak bound must be nonnegative")


def build_relaxed_system(real: BrunovskyRealization, gains: LinearFeedbackGains,
                         gamma: float, delta_w: float, s_out: SymMatrix) -> RelaxedLinearSystem:
    """Reorder the stabilized chains and normalize the disturbance to unit norm."""
    if gains.realization is not real and gains.realization.block_sizes != real.block_sizes:
        raise ValueError("gains were built for a different realization")
    a_bar = real.t @ gains.closed_loop @ real.t.T
    if s_out.dim != real.input_dim:
        raise ValueError("output norm matrix must match the output dimension")
    return RelaxedLinearSystem(a_bar, gamma, delta_w, s_out)


def invariant_ellipsoid_check(sys: RelaxedLinearSystem, p: SymMatrix, alpha: float,
                              tol: float = FEAS_TOL) -> bool:
    """Eigenvalue test of the invariance matrix inequality at decay rate alpha."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    pm = p.entries
    a, b = sys.a_bar, sys.b_bar
    m = sys.output_dim
    block = np.block([
        [a.T @ pm + pm @ a + alpha * pm, pm @ b],
        [b.T @ pm, -alpha * np.eye(m)],
    ])
    return float(np.linalg.eigvalsh(block)[-1]) <= tol


def _search_bracket(sys: RelaxedLinearSystem) -> ScalarBracket:
    ab = sys.alpha_bar
    edge = BRACKET_EDGE * ab
    return ScalarBracket(edge, ab - edge, tol=1e-4 * ab)


def _quad_inv(q: np.ndarray, z: np.ndarray) -> float:
    """z^T Q^-1 z for symmetric PSD Q; +inf if z leaves the range of Q."""
    vals, vecs = np.linalg.eigh(q)
    w = vecs.T @ z
    cut = max(vals[-1], 0.0) * 1e-13
    if np.any((vals <= cut) & (np.abs(w) > 1e-9 * max(1.0, float(np.linalg.norm(z))))):
        return math.inf
    keep = vals > cut
    return float(np.sum(w[keep] ** 2 / vals[keep]))


def _lyap_gramian(sys: RelaxedLinearSystem, alpha: float,
                  inflate: float = 0.0) -> np.ndarray:
    """Solve Abar Q + Q Abar^T + alpha Q + (1/alpha) Bbar Bbar^T (+ inflate*I) = 0."""
    n = sys.state_dim
    a_shift = sys.a_bar + 0.5 * alpha * np.eye(n)
    rhs = sys.b_bar @ sys.b_bar.T / alpha
    if inflate > 0.0:
        rhs = rhs + inflate * np.trace(rhs) / n * np.eye(n)
    return solve_lyapunov(a_shift, SymMatrix(rhs)).entries


def _lyap_bound_at(sys: RelaxedLinearSystem, alpha: float, z0: np.ndarray):
    """The Lyapunov-route bound value and its certificate at one alpha."""
    q = _lyap_gramian(sys, alpha)
    s_half = sys.sqrt_s
    c = sys.c_bar
    out_gain = s_half @ c @ q @ c.T @ s_half
    lam = float(np.linalg.eigvalsh(out_gain)[-1])
    scale = 1.0 if not np.any(z0) else max(_quad_inv(q, z0), 1.0)
    return lam * scale, q


def peak_bound_lyap(sys: RelaxedLinearSystem, z0) -> PeakBound:
    """Peak-output bound from a sweep of algebraic Lyapunov equations."""
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (sys.state_dim,):
        raise ValueError(f"initial state must have dimension {sys.state_dim}")
    bracket = _search_bracket(sys)

    def f(alpha: float) -> float:
        try:
            value, _ = _lyap_bound_at(sys, alpha, z0)
        except (NotHurwitz, NumericalFailure):
            return math.inf
        return value

    alpha_star, delta = minimize_scalar(f, bracket)
    if not math.isfinite(delta):
        raise NumericalFailure("Lyapunov bound is infinite across the bracket")
    _, q = _lyap_bound_at(sys, alpha_star, z0)
    return PeakBound(delta, alpha_star, BoundMethod.LYAP, SymMatrix(q), z0)


class _SdpFamily:
    """Alpha-parameterized peak-bound SDPs sharing precomputed coefficients.

    Decision variables are the ellipsoid matrix P and the bound delta.
    Only the invariance block depends on alpha (affinely), so each solve
    just recombines cached tensors. Every solve is started from a strictly
    feasible point built from an inflated Lyapunov solution, so Phase 1 is
    never needed on this path.
    """

    def __init__(self, sys: RelaxedLinearSystem, z0: np.ndarray):
        self.sys = sys
        n, m = sys.state_dim, sys.output_dim
        self.specs = (VarSpec("sym", n), VarSpec("scalar"))
        nsym = n * (n + 1) // 2
        d = nsym + 1
        self.dim = d
        a, b, c = sys.a_bar, sys.b_bar, sys.c_bar
        s_half = sys.sqrt_s
        k1 = n + m

        basis = []
        for i in range(n):
            for j in range(i, n):
                e = np.zeros((n, n))
                e[i, j] = 1.0
                e[j, i] = 1.0
                basis.append(e)

        # invariance block, negated to >= 0 form: const and coefficients
        # split into alpha-independent and alpha-proportional parts
        self.inv_const_alpha = np.zeros((k1, k1))
        self.inv_const_alpha[n:, n:] = np.eye(m)
        self.inv_coeffs_base = np.zeros((d, k1, k1))
        self.inv_coeffs_alpha = np.zeros((d, k1, k1))
        for idx, e in enumerate(basis):
            blk = np.zeros((k1, k1))
            blk[:n, :n] = -(a.T @ e + e @ a)
            blk[:n, n:] = -e @ b
            blk[n:, :n] = -(e @ b).T
            self.inv_coeffs_base[idx] = blk
            ablk = np.zeros((k1, k1))
            ablk[:n, :n] = -e
            self.inv_coeffs_alpha[idx] = ablk

        out_const = np.zeros((k1, k1))
        out_const[:n, n:] = c.T @ s_half
        out_const[n:, :n] = s_half @ c
        out_coeffs = np.zeros((d, k1, k1))
        for idx, e in enumerate(basis):
            out_coeffs[idx, :n, :n] = e
        out_coeffs[nsym, n:, n:] = np.eye(m)
        self.out_block = _Block(out_const, out_coeffs, "psd")

        pd_coeffs = np.zeros((d, n, n))
        for idx, e in enumerate(basis):
            pd_coeffs[idx] = e
        self.pd_block = _Block(np.zeros((n, n)), pd_coeffs, "psd")

        self.z0 = z0
        self.has_z0 = bool(np.any(z0))
        if self.has_z0:
            ic_coeffs = np.zeros((d, 1, 1))
            for idx, e in enumerate(basis):
                ic_coeffs[idx, 0, 0] = -float(z0 @ e @ z0)
            self.ic_block = _Block(np.array([[1.0]]), ic_coeffs, "psd")

        self.objective = np.zeros(d)
        self.objective[nsym] = 1.0

    def problem_at(self, alpha: float) -> LmiProblem:
        inv_block = _Block(
            alpha * self.inv_const_alpha,
            self.inv_coeffs_base + alpha * self.inv_coeffs_alpha,
            "nsd",
        )
        blocks = [inv_block, self.out_block, self.pd_block]
        if self.has_z0:
            blocks.append(self.ic_block)
        return LmiProblem(self.specs, tuple(blocks), self.objective)

    def interior_start(self, alpha: float) -> np.ndarray:
        """Strictly feasible (P, delta) from an inflated Lyapunov solution."""
        sys = self.sys
        q = _lyap_gramian(sys, alpha, inflate=0.25)
        p0 = np.linalg.inv(q)
        p0 = 0.5 * (p0 + p0.T)
        if self.has_z0:
            quad = float(self.z0 @ p0 @ self.z0)
            if quad >= 0.9:
                p0 = p0 * (0.8 / quad)
        gain = sys.sqrt_s @ sys.c_bar @ np.linalg.inv(p0) @ sys.c_bar.T @ sys.sqrt_s
        delta0 = 1.5 * float(np.linalg.eigvalsh(gain)[-1]) + 1e-9
        return flatten_values([SymMatrix(p0), delta0], self.specs)

    def solve(self, alpha: float):
        problem = self.problem_at(alpha)
        x0 = self.interior_start(alpha)
        obj, values = solve_lmi(problem, x0=x0)
        return obj, values


def peak_bound_sdp(sys: RelaxedLinearSystem, z0) -> PeakBound:
    """Peak-output bound from the alpha-parameterized semidefinite programs."""
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (sys.state_dim,):
        raise ValueError(f"initial state must have dimension {sys.state_dim}")
    family = _SdpFamily(sys, z0)
    bracket = _search_bracket(sys)
    cache: dict[float, SymMatrix] = {}

    def f(alpha: float) -> float:
        try:
            obj, values = family.solve(alpha)
        except (Infeasible, NotHurwitz, NumericalFailure):
            return math.inf
        cache[alpha] = values[0]
        return obj

    alpha_star, delta = minimize_scalar(f, bracket)
    if not math.isfinite(delta):
        raise NoFeasiblePoint("no feasible decay rate on the search interval")
    p_star = cache[alpha_star]
    if not invariant_ellipsoid_check(sys, p_star, alpha_star):
        raise NumericalFailure("certificate failed the invariance recheck")
    return PeakBound(delta, alpha_star, BoundMethod.SDP, p_star, z0)


class LyapBoundOracle:
    """Fast per-state Lyapunov bounds from a precomputed decay-rate grid.

    Every grid rate alpha yields a valid bound, so the grid minimum is a
    certified (if marginally conservative) bound. Intended for loops that
    re-evaluate the bound at every control step with a fixed system.
    """

    def __init__(self, sys: RelaxedLinearSystem, grid_points: int = 128):
        self.sys = sys
        bracket = _search_bracket(sys)
        alphas = np.linspace(bracket.lo, bracket.hi, grid_points)
        lams, qinvs, keep = [], [], []
        for alpha in alphas:
            try:
                q = _lyap_gramian(sys, alpha)
                gain = sys.sqrt_s @ sys.c_bar @ q @ sys.c_bar.T @ sys.sqrt_s
                lam = float(np.linalg.eigvalsh(gain)[-1])
                qinv = np.linalg.inv(q)
            except (NotHurwitz, NumericalFailure, np.linalg.LinAlgError):
                continue
            lams.append(lam)
            qinvs.append(0.5 * (qinv + qinv.T))
            keep.append(alpha)
        if not keep:
            raise NumericalFailure("no usable decay rate on the grid")
        self.alphas = np.array(keep)
        self.lams = np.array(lams)
        self.qinvs = np.stack(qinvs)

    def bound(self, z_shift) -> tuple[float, float]:
        """Certified bound and its decay rate for the shifted state."""
        z = np.asarray(z_shift, dtype=float)
        quad = np.einsum("i,aij,j->a", z, self.qinvs, z)
        vals = self.lams * np.maximum(quad, 1.0)
        i = int(np.argmin(vals))
        return float(vals[i]), float(self.alphas[i])

    def ultimate(self) -> float:
        """The zero-state (asymptotic) bound on the grid."""
        return float(np.min(self.lams))

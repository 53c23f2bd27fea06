"""Control-affine plants and exact feedback linearization.

A plant is described by its drift f(x), input matrix G(x), output h(x),
vector relative degree, and the closed-form linearization data: the
coordinate map into output-derivative coordinates, the decoupling matrix
M(x) and the residual drift n(x) of the highest output derivatives. The
linearizing law u = M(x)^-1 (v - n(x)) turns the plant into chains of
integrators in Brunovsky canonical form, with input disturbance entering
through M(x).

The closed-form data is supplied per plant (hand-derived for the
Ackermann drive) rather than generated by symbolic differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NotHurwitz, SingularState
from .numkit import spectral_abscissa

__all__ = [
    "NonlinearPlant",
    "BrunovskyRealization",
    "AckermannParams",
    "LinearFeedbackGains",
    "ackermann_plant",
    "feedback_linearize",
    "brunovsky_realization",
    "gains_from_poles",
    "bw_norm_bound",
]


@dataclass(frozen=True)
class NonlinearPlant:
    """A control-affine system xdot = f(x) + G(x)(u + w), y = h(x),
    together with its exact-linearization data."""

    name: str
    state_dim: int
    input_dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    input_matrix: Callable[[np.ndarray], np.ndarray]
    output: Callable[[np.ndarray], np.ndarray]
    relative_degree: tuple[int, ...]
    coordinate_map: Callable[[np.ndarray], np.ndarray]
    decoupling: Callable[[np.ndarray], np.ndarray]
    drift_term: Callable[[np.ndarray], np.ndarray]
    singular_reason: Callable[[np.ndarray], Optional[str]]
    # simulation-side state clamp (e.g. speed floor); returns (x, reason|None)
    clamp_state: Optional[Callable[[np.ndarray], tuple[np.ndarray, Optional[str]]]] = None

    def __post_init__(self):
        if sum(self.relative_degree) != self.state_dim:
            raise ValueError(
                "relative degrees must sum to the state dimension "
                f"({self.relative_degree} vs n={self.state_dim})"
            )


@dataclass(frozen=True)
class AckermannParams:
    """Operating parameters of the jerk-controlled Ackermann drive.

    `beta` bounds the speed-steering ratio v^2/(l cos^2 delta) over the
    admissible operating envelope; `v_min` is the speed floor that keeps
    the decoupling matrix invertible.
    """

    wheelbase_m: float = 1.0
    beta: float = 10.0
    v_min_mps: float = 0.01
    max_steer_rad: float = 1.35

    def __post_init__(self):
        if self.wheelbase_m <= 0:
            raise ValueError("wheelbase must be positive")
        if self.v_min_mps <= 0:
            raise ValueError("v_min must be positive")
        if self.beta < self.v_min_mps ** 2 / self.wheelbase_m:
            raise ValueError("beta must cover the minimum-speed operating point")
        if not 0 < self.max_steer_rad < math.pi / 2:
            raise ValueError("max steer must lie in (0, pi/2)")


def ackermann_plant(params: AckermannParams) -> NonlinearPlant:
    """Jerk/steering-rate controlled Ackermann drive with position output.

    State x = (px, py, psi, steer, v, a), input u = (jerk, steer_rate),
    output (px, py), relative degree (3, 3).
    """
    l = params.wheelbase_m
    g_mat = np.zeros((6, 2))
    g_mat[5, 0] = 1.0  # jerk drives acceleration
    g_mat[3, 1] = 1.0  # steering rate drives steering angle

    def drift(x):
        px, py, psi, steer, v, a = x
        return np.array([
            v * math.cos(psi),
            v * math.sin(psi),
            v * math.tan(steer) / l,
            0.0,
            a,
            0.0,
        ])

    def input_matrix(x):
        return g_mat

    def output(x):
        return np.array([x[0], x[1]])

    def coordinate_map(x):
        px, py, psi, steer, v, a = x
        c, s = math.cos(psi), math.sin(psi)
        psid = v * math.tan(steer) / l
        return np.array([
            px,
            v * c,
            a * c - v * psid * s,
            py,
            v * s,
            a * s + v * psid * c,
        ])

    def decoupling(x):
        _, _, psi, steer, v, _ = x
        c, s = math.cos(psi), math.sin(psi)
        k = v * v / (l * math.cos(steer) ** 2)
        return np.array([[c, -k * s], [s, k * c]])

    def drift_term(x):
        _, _, psi, steer, v, a = x
        c, s = math.cos(psi), math.sin(psi)
        psid = v * math.tan(steer) / l
        return np.array([
            -3.0 * a * psid * s - v * psid * psid * c,
            3.0 * a * psid * c - v * psid * psid * s,
        ])

    def singular_reason(x):
        if abs(x[4]) < 1e-12:
            return "speed is zero"
        if abs(math.cos(x[3])) < 1e-12:
            return "steering angle at +-pi/2"
        return None

    def clamp_state(x):
        reason = None
        if x[4] < params.v_min_mps:
            x = x.copy()
            x[4] = params.v_min_mps
            reason = "speed clamped at floor"
        if abs(x[3]) > params.max_steer_rad:
            x = x.copy()
            x[3] = math.copysign(params.max_steer_rad, x[3])
            reason = "steering clamped at limit"
        return x, reason

    return NonlinearPlant(
        name="ackermann",
        state_dim=6,
        input_dim=2,
        drift=drift,
        input_matrix=input_matrix,
        output=output,
        relative_degree=(3, 3),
        coordinate_map=coordinate_map,
        decoupling=decoupling,
        drift_term=drift_term,
        singular_reason=singular_reason,
        clamp_state=clamp_state,
    )


def feedback_linearize(plant: NonlinearPlant, x: np.ndarray, v_cmd: np.ndarray) -> np.ndarray:
    """The linearizing law u = M(x)^-1 (v_cmd - n(x)).

    Raises SingularState (naming the condition) when the decoupling matrix
    is singular at x.
    """
    reason = plant.singular_reason(x)
    if reason is not None:
        raise SingularState(f"decoupling matrix singular: {reason}")
    m = plant.decoupling(x)
    return np.linalg.solve(m, np.asarray(v_cmd, dtype=float) - plant.drift_term(x))


@dataclass(frozen=True)
class BrunovskyRealization:
    """Integrator-chain matrices (A, B, C) plus the state reordering T.

    T permutes the chain coordinates z into ztilde = T z with the outputs
    first (so T C^T recovers [I, 0]) and each chain's top derivative last
    (so the disturbance enters only the trailing block).
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    t: np.ndarray
    block_sizes: tuple[int, ...]

    @property
    def state_dim(self) -> int:
        return self.a.shape[0]

    @property
    def input_dim(self) -> int:
        return self.b.shape[1]

    @property
    def c_bar(self) -> np.ndarray:
        """Output matrix in reordered coordinates, equal to [I, 0]."""
        return self.c @ self.t.T


def brunovsky_realization(rho: Sequence[int]) -> BrunovskyRealization:
    """Build the canonical chains for relative degree rho and the
    output-first / chain-end-last permutation T."""
    rho = tuple(int(r) for r in rho)
    if any(r < 1 for r in rho):
        raise ValueError("relative degrees must be >= 1")
    n = sum(rho)
    m = len(rho)
    a = np.zeros((n, n))
    b = np.zeros((n, m))
    c = np.zeros((m, n))
    offsets = np.concatenate([[0], np.cumsum(rho)])[:-1]
    for i, (r, o) in enumerate(zip(rho, offsets)):
        for k in range(r - 1):
            a[o + k, o + k + 1] = 1.0
        b[o + r - 1, i] = 1.0
        c[i, o] = 1.0

    if any(r == 1 for r in rho) and any(r > 1 for r in rho):
        raise ValueError(
            "mixed unit and non-unit relative degrees have no reordering with "
            "outputs first and chain ends last"
        )
    heads = [int(o) for o in offsets]
    if all(r == 1 for r in rho):
        order = heads
    else:
        tails = [int(o) + r - 1 for r, o in zip(rho, offsets)]
        middle = []
        for k in range(1, max(rho)):
            for r, o in zip(rho, offsets):
                if k < r - 1:
                    middle.append(int(o) + k)
        order = heads + middle + tails
    t = np.zeros((n, n))
    for i, j in enumerate(order):
        t[i, j] = 1.0
    return BrunovskyRealization(a, b, c, t, rho)


@dataclass(frozen=True)
class LinearFeedbackGains:
    """Stabilizing gains v = -K z for a Brunovsky realization.

    Construction fails with NotHurwitz unless A - B K is Hurwitz.
    """

    k: np.ndarray
    realization: BrunovskyRealization

    def __post_init__(self):
        k = np.asarray(self.k, dtype=float)
        real = self.realization
        if k.shape != (real.input_dim, real.state_dim):
            raise ValueError(f"gain matrix must be {real.input_dim}x{real.state_dim}")
        object.__setattr__(self, "k", k)
        if spectral_abscissa(real.a - real.b @ k) >= 0.0:
            raise NotHurwitz("A - B K has an eigenvalue with Re >= 0")

    @property
    def closed_loop(self) -> np.ndarray:
        return self.realization.a - self.realization.b @ self.k


def gains_from_poles(real: BrunovskyRealization, chain_poles: Sequence[Sequence[complex]]) -> LinearFeedbackGains:
    """Pole placement per integrator chain.

    Each chain of length r gets gains equal to the coefficients of its
    desired characteristic polynomial (lowest order first); complex poles
    must come in conjugate pairs.
    """
    if len(chain_poles) != len(real.block_sizes):
        raise ValueError("one pole list per chain required")
    k = np.zeros((real.input_dim, real.state_dim))
    offset = 0
    for i, (r, poles) in enumerate(zip(real.block_sizes, chain_poles)):
        poles = [complex(p) for p in poles]
        if len(poles) != r:
            raise ValueError(f"chain {i} needs {r} poles, got {len(poles)}")
        coeffs = np.poly(poles)  # highest order first, monic
        if np.max(np.abs(coeffs.imag)) > 1e-9 * max(1.0, np.max(np.abs(coeffs))):
            raise ValueError(f"chain {i} poles are not closed under conjugation")
        k[i, offset:offset + r] = coeffs.real[1:][::-1]
        offset += r
    return LinearFeedbackGains(k, real)


def bw_norm_bound(plant: NonlinearPlant, params: AckermannParams) -> float:
    """Upper bound gamma on the decoupling-matrix spectral norm over the
    operating envelope."""
    if plant.name != "ackermann":
        raise ValueError(f"no operating-envelope bound known for plant {plant.name!r}")
    return max(1.0, params.beta)

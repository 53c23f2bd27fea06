"""Dense numerical kernels for the bound computations.

Symmetric eigendecomposition, spectral abscissa, a continuous Lyapunov
equation solver, a small-scale LMI/SDP solver (log-det barrier interior
point with Phase-1 feasibility), and a bracketed scalar minimizer.

Everything here operates on small dense matrices (state dimensions in the
single digits, a few dozen scalar decision variables at most). All
functions are pure and thread-safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .errors import Infeasible, NoFeasiblePoint, NotHurwitz, NumericalFailure

__all__ = [
    "SymMatrix",
    "VarSpec",
    "LmiProblem",
    "ScalarBracket",
    "sym_eig",
    "spectral_abscissa",
    "solve_lyapunov",
    "solve_lmi",
    "minimize_scalar",
]

# Positive-definiteness tolerance, relative to the matrix scale.
PD_RTOL = 1e-10
# Feasibility tolerance for re-validating LMI solutions by eigenvalue checks.
FEAS_TOL = 1e-7


def _as_sym_array(m) -> np.ndarray:
    """Coerce a SymMatrix or array-like into a symmetric float ndarray."""
    if isinstance(m, SymMatrix):
        return m.entries
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class SymMatrix:
    """A real symmetric matrix, symmetrized on construction.

    The shared currency for shape matrices of ellipsoids, Lyapunov
    solutions, and quadratic output norms.
    """

    entries: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        a = 0.5 * (a + a.T)
        a.flags.writeable = False
        object.__setattr__(self, "entries", a)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def identity(cls, n: int) -> "SymMatrix":
        return cls(np.eye(n))

    @classmethod
    def diagonal(cls, values) -> "SymMatrix":
        return cls(np.diag(np.asarray(values, dtype=float)))

    def eigenvalues(self) -> np.ndarray:
        return sym_eig(self)[0]

    @property
    def is_positive_definite(self) -> bool:
        vals = np.linalg.eigvalsh(self.entries)
        tol = PD_RTOL * max(np.max(np.abs(vals)), 0.0)
        return bool(np.all(vals > tol))

    def sqrt(self) -> "SymMatrix":
        """Principal square root. Requires positive semidefiniteness."""
        vals, vecs = sym_eig(self)
        if np.min(vals) < -PD_RTOL * max(1.0, np.max(np.abs(vals))):
            raise ValueError("matrix square root of an indefinite matrix")
        root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
        return SymMatrix(root)

    def inv(self) -> "SymMatrix":
        return SymMatrix(np.linalg.inv(self.entries))

    def min_eig(self) -> float:
        return float(np.linalg.eigvalsh(self.entries)[0])

    def max_eig(self) -> float:
        return float(np.linalg.eigvalsh(self.entries)[-1])


def sym_eig(m) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues ascending, orthonormal eigenvector matrix V) with
    m == V diag(vals) V^T.
    """
    a = _as_sym_array(m)
    try:
        vals, vecs = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"symmetric eigendecomposition failed: {exc}") from exc
    return vals, vecs


def spectral_abscissa(a) -> float:
    """Maximum real part of the eigenvalues of a general square matrix."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    try:
        vals = np.linalg.eigvals(a)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"eigenvalue iteration failed: {exc}") from exc
    return float(np.max(vals.real))


def solve_lyapunov(a, rhs) -> SymMatrix:
    """Solve a Q + Q a^T + rhs = 0 for symmetric Q, with a Hurwitz.

    Uses the Schur-form (Bartels-Stewart) solver; the test suite checks it
    against an independent Kronecker-vectorization solve.
    """
    from scipy.linalg import solve_continuous_lyapunov

    a = np.asarray(a, dtype=float)
    r = _as_sym_array(rhs)
    if a.shape != r.shape:
        raise ValueError(f"shape mismatch: a {a.shape} vs rhs {r.shape}")
    if spectral_abscissa(a) >= 0.0:
        raise NotHurwitz("coefficient matrix has an eigenvalue with Re >= 0")
    q = solve_continuous_lyapunov(a, -r)
    q = 0.5 * (q + q.T)
    residual = np.linalg.norm(a @ q + q @ a.T + r)
    scale = np.linalg.norm(a) * np.linalg.norm(q) + np.linalg.norm(r)
    if not np.isfinite(residual) or residual > 1e-8 * max(scale, 1e-30):
        raise NumericalFailure(
            f"Lyapunov residual {residual:.3e} exceeds tolerance (scale {scale:.3e})"
        )
    return SymMatrix(q)


# ---------------------------------------------------------------------------
# LMI / SDP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VarSpec:
    """One decision variable: a symmetric matrix ('sym') or a scalar."""

    kind: str
    dim: int = 1

    def __post_init__(self):
        if self.kind not in ("sym", "scalar"):
            raise ValueError(f"unknown variable kind {self.kind!r}")
        if self.kind == "scalar" and self.dim != 1:
            raise ValueError("scalar variables have dim 1")
        if self.dim < 1:
            raise ValueError("variable dimension must be >= 1")

    @property
    def size(self) -> int:
        return self.dim * (self.dim + 1) // 2 if self.kind == "sym" else 1


def _sym_basis(n: int) -> list[np.ndarray]:
    """Basis E_ij (i <= j) such that P = sum x_ij E_ij has P[i, j] = x_ij."""
    basis = []
    for i in range(n):
        for j in range(i, n):
            e = np.zeros((n, n))
            e[i, j] = 1.0
            e[j, i] = 1.0
            basis.append(e)
    return basis


@dataclass(frozen=True)
class _Block:
    """One constraint block, normalized to G(x) = const + sum_i x_i coeffs[i] >= 0."""

    const: np.ndarray
    coeffs: np.ndarray  # (d, k, k)
    sense: str  # original sense, 'psd' or 'nsd'


@dataclass(frozen=True)
class LmiProblem:
    """minimize c@x subject to affine matrix blocks being PSD (or NSD).

    Decision variables are described by `var_specs` and flattened into a
    single vector x (symmetric matrices by upper-triangle entries, row
    major). Blocks are stored in normalized >= 0 form.
    """

    var_specs: tuple[VarSpec, ...]
    blocks: tuple[_Block, ...]
    objective: np.ndarray
    objective_const: float = 0.0

    @property
    def dim(self) -> int:
        return int(self.objective.shape[0])

    @classmethod
    def from_affine(
        cls,
        var_specs: Sequence[VarSpec],
        block_fns: Sequence[tuple[Callable, str]],
        objective_fn: Callable,
    ) -> "LmiProblem":
        """Build a problem from affine callables on the decision variables.

        Each block callable maps the decision values (ndarrays for 'sym'
        variables, floats for scalars) to a symmetric matrix; senses are
        'psd' (>= 0) or 'nsd' (<= 0). Affinity is verified structurally by
        probing, so a non-affine callable raises ValueError here rather
        than corrupting the solve.
        """
        specs = tuple(var_specs)
        d = sum(s.size for s in specs)
        zero = _unflatten(np.zeros(d), specs)

        def probe(fn, x):
            return np.asarray(fn(*_unflatten(x, specs)), dtype=float)

        blocks = []
        rng = np.random.default_rng(0)
        for fn, sense in block_fns:
            if sense not in ("psd", "nsd"):
                raise ValueError(f"unknown block sense {sense!r}")
            b0 = np.asarray(fn(*zero), dtype=float)
            if b0.ndim != 2 or b0.shape[0] != b0.shape[1]:
                raise ValueError("block callables must return square matrices")
            coeffs = np.empty((d, *b0.shape))
            eye = np.eye(d)
            for i in range(d):
                coeffs[i] = probe(fn, eye[i]) - b0
            # structural affinity check at a random probe point
            xr = rng.standard_normal(d)
            lin = b0 + np.tensordot(xr, coeffs, axes=1)
            if not np.allclose(probe(fn, xr), lin, rtol=1e-8, atol=1e-8 * (1 + np.abs(lin).max())):
                raise ValueError("block callable is not affine in the decision variables")
            sign = 1.0 if sense == "psd" else -1.0
            sym = lambda m: 0.5 * (m + m.T)
            blocks.append(
                _Block(sym(sign * b0), np.array([sym(sign * c) for c in coeffs]), sense)
            )

        c0 = float(objective_fn(*zero))
        c = np.empty(d)
        eye = np.eye(d)
        for i in range(d):
            c[i] = float(objective_fn(*_unflatten(eye[i], specs))) - c0
        xr = rng.standard_normal(d)
        if not math.isclose(
            float(objective_fn(*_unflatten(xr, specs))), c0 + float(c @ xr),
            rel_tol=1e-9, abs_tol=1e-9,
        ):
            raise ValueError("objective callable is not linear in the decision variables")
        return cls(specs, tuple(blocks), c, c0)

    def unflatten(self, x: np.ndarray) -> list:
        return _unflatten(np.asarray(x, dtype=float), self.var_specs)

    def block_values(self, x: np.ndarray) -> list[np.ndarray]:
        """Evaluate every block (in its original sense) at the point x."""
        out = []
        for b in self.blocks:
            g = b.const + np.tensordot(x, b.coeffs, axes=1)
            out.append(g if b.sense == "psd" else -g)
        return out

    def feasibility_margins(self, x: np.ndarray) -> list[float]:
        """Signed margin per block: min eig for >= 0 blocks, -max eig for <= 0.

        Nonnegative margins mean the constraint holds.
        """
        margins = []
        for b in self.blocks:
            g = b.const + np.tensordot(x, b.coeffs, axes=1)
            margins.append(float(np.linalg.eigvalsh(g)[0]))
        return margins


def _unflatten(x: np.ndarray, specs: tuple[VarSpec, ...]) -> list:
    out = []
    k = 0
    for s in specs:
        if s.kind == "scalar":
            out.append(float(x[k]))
            k += 1
        else:
            n = s.dim
            m = np.zeros((n, n))
            for i in range(n):
                for j in range(i, n):
                    m[i, j] = m[j, i] = x[k]
                    k += 1
            out.append(m)
    return out


def flatten_values(values: Sequence, specs: Sequence[VarSpec]) -> np.ndarray:
    """Inverse of LmiProblem.unflatten."""
    parts = []
    for v, s in zip(values, specs):
        if s.kind == "scalar":
            parts.append([float(v)])
        else:
            m = _as_sym_array(v)
            parts.append([m[i, j] for i in range(s.dim) for j in range(i, s.dim)])
    return np.concatenate([np.asarray(p, dtype=float) for p in parts])


def _chol_or_none(g: np.ndarray):
    try:
        return np.linalg.cholesky(g)
    except np.linalg.LinAlgError:
        return None


@njit(cache=True)
def _chol_flag(a):
    """Lower Cholesky with a success flag instead of an exception."""
    n = a.shape[0]
    low = np.zeros_like(a)
    for i in range(n):
        for j in range(i + 1):
            s = a[i, j]
            for k in range(j):
                s -= low[i, k] * low[j, k]
            if i == j:
                if s <= 0.0:
                    return low, False
                low[i, i] = math.sqrt(s)
            else:
                low[i, j] = s / low[j, j]
    return low, True


@njit(cache=True)
def _assemble_g(const, coeffs, x):
    g = const.copy()
    for i in range(x.shape[0]):
        xi = x[i]
        if xi != 0.0:
            g += xi * coeffs[i]
    return g


@njit(cache=True)
def _barrier_val_nb(const, coeffs, x, tc, box):
    for i in range(x.shape[0]):
        if abs(x[i]) >= box:
            return np.inf, False
    g = _assemble_g(const, coeffs, x)
    low, ok = _chol_flag(g)
    if not ok:
        return np.inf, False
    val = 0.0
    for i in range(x.shape[0]):
        val += tc[i] * x[i]
        val -= math.log(box - x[i]) + math.log(box + x[i])
    for i in range(low.shape[0]):
        val -= 2.0 * math.log(low[i, i])
    return val, True


@njit(cache=True)
def _newton_center_nb(const, coeffs, c, t, x, box, newton_tol, max_iter,
                      stop_idx, stop_thresh):
    """Damped Newton centering of the log-det barrier.

    Returns (x, status): 0 converged or stalled, 1 stop condition hit,
    2 iteration cap exceeded, 3 started infeasible.
    """
    d = x.shape[0]
    kk = const.shape[0]
    tc = t * c
    f0, ok = _barrier_val_nb(const, coeffs, x, tc, box)
    if not ok:
        return x, 3
    wr = np.empty((d, kk * kk))
    wt = np.empty((d, kk * kk))
    grad = np.empty(d)
    for _ in range(max_iter):
        g = _assemble_g(const, coeffs, x)
        ginv = np.linalg.inv(g)
        ginv = 0.5 * (ginv + ginv.T)
        for i in range(d):
            wi = ginv @ coeffs[i]
            tr = 0.0
            for a in range(kk):
                tr += wi[a, a]
            grad[i] = tc[i] - tr + 1.0 / (box - x[i]) - 1.0 / (box + x[i])
            for a in range(kk):
                for b in range(kk):
                    wr[i, a * kk + b] = wi[a, b]
                    wt[i, a * kk + b] = wi[b, a]
        hess = wr @ wt.T
        for i in range(d):
            hess[i, i] += 1.0 / (box - x[i]) ** 2 + 1.0 / (box + x[i]) ** 2
        step = np.linalg.solve(hess, -grad)
        decrement = -(grad @ step)
        if decrement <= 0.0 or 0.5 * decrement <= newton_tol:
            return x, 0
        beta = 1.0
        accepted = False
        x_new = x
        f_new = f0
        while beta > 1e-12:
            x_new = x + beta * step
            f_new, ok = _barrier_val_nb(const, coeffs, x_new, tc, box)
            if ok and f_new < f0 - 0.25 * beta * decrement:
                accepted = True
                break
            beta *= 0.5
        if not accepted:
            return x, 0
        x = x_new
        f0 = f_new
        if stop_idx >= 0 and x[stop_idx] < stop_thresh:
            return x, 1
    return x, 2


def _consolidate(blocks) -> _Block:
    """Stack normalized blocks into one block-diagonal constraint.

    The Newton iteration works on the combined matrix: a single Cholesky /
    inverse per step instead of one per block, which matters at these tiny
    sizes where per-call overhead dominates.
    """
    dims = [b.const.shape[0] for b in blocks]
    k_total = sum(dims)
    d = blocks[0].coeffs.shape[0]
    const = np.zeros((k_total, k_total))
    coeffs = np.zeros((d, k_total, k_total))
    at = 0
    for b, k in zip(blocks, dims):
        const[at:at + k, at:at + k] = b.const
        coeffs[:, at:at + k, at:at + k] = b.coeffs
        at += k
    return _Block(const, coeffs, "psd")


def _barrier_minimize(big: _Block, c, x0, box, *, gap_abs, gap_rel, mu=30.0,
                      max_stages=60, stop_idx=-1, stop_thresh=0.0):
    """Path-following barrier minimization from a strictly feasible x0.

    The box barrier -sum log(box^2 - x_i^2) keeps every subproblem's
    sublevel sets bounded even when the matrix constraints leave a free
    direction (big-M safeguard). An optional stop condition
    x[stop_idx] < stop_thresh supports early exit (Phase 1).
    """
    d = x0.shape[0]
    nu = big.const.shape[0] + 2 * d
    x = np.ascontiguousarray(x0, dtype=float)
    c = np.ascontiguousarray(c, dtype=float)
    # aim the first stage at a duality gap around the objective scale
    t = nu / max(1.0, abs(float(c @ x)))
    for _ in range(max_stages):
        x, status = _newton_center_nb(
            big.const, big.coeffs, c, t, x, box, 1e-8, 200, stop_idx, stop_thresh
        )
        if status == 1:
            return x
        if status == 2:
            raise NumericalFailure("Newton centering exceeded its iteration cap")
        if status == 3:
            raise NumericalFailure("barrier stage started outside the feasible cone")
        gap = nu / t
        if gap <= max(gap_abs, gap_rel * abs(float(c @ x))):
            return x
        t *= mu
    raise NumericalFailure("barrier method exceeded its stage cap")


def _strictly_feasible(big: _Block, x, box, margin=0.0) -> bool:
    if np.max(np.abs(x)) >= box:
        return False
    g = big.const + np.tensordot(x, big.coeffs, axes=1)
    k = g.shape[0]
    return _chol_or_none(g - margin * np.eye(k)) is not None


def _const_scale(blocks) -> float:
    return max(1.0, *(float(np.abs(b.const).max()) for b in blocks))


def _phase1(big: _Block, d, x_start, scale):
    """Find a strictly feasible point by minimizing the infeasibility s."""
    g = big.const + np.tensordot(x_start, big.coeffs, axes=1)
    worst = float(np.linalg.eigvalsh(g)[0])
    s0 = max(0.0, -worst) + 0.1 * scale

    k = big.const.shape[0]
    coeffs = np.concatenate([big.coeffs, np.eye(k)[None, :, :]], axis=0)
    aug = _Block(big.const, coeffs, "psd")

    c = np.zeros(d + 1)
    c[d] = 1.0
    exit_margin = 1e-7 * scale

    # escalate the search box if the interior lives at a larger magnitude
    box = 1e4 * max(1.0, scale, float(np.max(np.abs(x_start))) if d else 1.0, s0)
    last = None
    for _ in range(3):
        x_aug = np.concatenate([x_start, [s0]])
        x_aug = _barrier_minimize(
            aug, c, x_aug, box, gap_abs=1e-9 * scale, gap_rel=1e-9,
            stop_idx=d, stop_thresh=-exit_margin,
        )
        if x_aug[d] < -exit_margin:
            return x_aug[:d]
        last = x_aug[d]
        box *= 100.0
    raise Infeasible(f"no strictly feasible point (best infeasibility {last:.3e})")


def solve_lmi(problem: LmiProblem, x0: np.ndarray | None = None,
              gap_abs: float = 1e-9, gap_rel: float = 1e-6):
    """Solve a small SDP in inequality form by an interior-point method.

    Runs a Phase-1 feasibility search unless `x0` is already strictly
    feasible, then follows the central path of the log-det barrier. The
    returned point is re-validated by an eigenvalue check of every block
    against FEAS_TOL before it is handed back.

    Returns (objective_value, decision_values) where decision values are
    SymMatrix for matrix variables and float for scalars.

    Raises Infeasible when Phase 1 certifies there is no interior point,
    NumericalFailure when the iteration caps are exceeded.
    """
    d = problem.dim
    big = _consolidate(problem.blocks)
    scale = _const_scale(problem.blocks)
    if x0 is not None:
        x = np.asarray(x0, dtype=float).copy()
        if x.shape != (d,):
            raise ValueError(f"x0 has shape {x.shape}, expected ({d},)")
        if not _strictly_feasible(big, x, np.inf, margin=1e-12):
            x = _phase1(big, d, x, scale)
    else:
        x = _phase1(big, d, np.zeros(d), scale)

    box = 1e8 * max(1.0, scale, float(np.max(np.abs(x))) if d else 1.0)
    x = _barrier_minimize(big, problem.objective, x, box,
                          gap_abs=gap_abs, gap_rel=gap_rel)

    margins = problem.feasibility_margins(x)
    if min(margins) < -FEAS_TOL:
        raise NumericalFailure(
            f"solution failed post-hoc feasibility recheck (margin {min(margins):.3e})"
        )
    obj = float(problem.objective @ x) + problem.objective_const
    values = [
        SymMatrix(v) if s.kind == "sym" else v
        for v, s in zip(problem.unflatten(x), problem.var_specs)
    ]
    return obj, values


# ---------------------------------------------------------------------------
# Scalar minimization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalarBracket:
    """A closed search interval [lo, hi] with an absolute x tolerance."""

    lo: float
    hi: float
    tol: float = 1e-6

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"bracket requires lo < hi, got [{self.lo}, {self.hi}]")
        if not self.tol > 0:
            raise ValueError("bracket tol must be positive")


PRESCAN_POINTS = 64
_GOLDEN = 0.5 * (3.0 - math.sqrt(5.0))


def _clean(v: float) -> float:
    v = float(v)
    return v if math.isfinite(v) else math.inf


def minimize_scalar(f: Callable[[float], float], bracket: ScalarBracket):
    """Minimize f on the bracket: 64-point pre-scan, then Brent refinement.

    f may return +inf (or nan, treated as +inf) to mark infeasible points.
    Returns (x_star, f_star) at the best evaluated point, which never lies
    outside the bracket. Raises NoFeasiblePoint if every evaluation on the
    pre-scan grid is infinite.
    """
    xs = np.linspace(bracket.lo, bracket.hi, PRESCAN_POINTS)
    fs = np.array([_clean(f(x)) for x in xs])
    if not np.any(np.isfinite(fs)):
        raise NoFeasiblePoint("objective is infinite on the whole bracket")
    i = int(np.argmin(fs))
    a = xs[max(i - 1, 0)]
    b = xs[min(i + 1, PRESCAN_POINTS - 1)]
    x_best, f_best = _brent_bounded(f, a, b, xs[i], fs[i], bracket.tol)
    if fs[i] < f_best:
        return float(xs[i]), float(fs[i])
    return float(x_best), float(f_best)


def _brent_bounded(f, a, b, x, fx, xtol, max_iter=120):
    """Brent's bounded minimization with +inf-tolerant parabolic steps."""
    w = v = x
    fw = fv = fx
    d = e = 0.0
    best_x, best_f = x, fx
    for _ in range(max_iter):
        mid = 0.5 * (a + b)
        tol1 = xtol + 1e-12 * abs(x)
        tol2 = 2.0 * tol1
        if abs(x - mid) <= tol2 - 0.5 * (b - a):
            break
        use_golden = True
        if abs(e) > tol1 and all(map(math.isfinite, (fx, fw, fv))):
            # parabolic fit through (x, fx), (w, fw), (v, fv)
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0.0:
                p = -p
            q = abs(q)
            e_prev, e = e, d
            if abs(p) < abs(0.5 * q * e_prev) and q * (a - x) < p < q * (b - x):
                d = p / q
                u = x + d
                if (u - a) < tol2 or (b - u) < tol2:
                    d = tol1 if x < mid else -tol1
                use_golden = False
        if use_golden:
            e = (b - x) if x < mid else (a - x)
            d = _GOLDEN * e
        u = x + d if abs(d) >= tol1 else x + (tol1 if d > 0 else -tol1)
        fu = _clean(f(u))
        if fu < best_f:
            best_x, best_f = u, fu
        if fu <= fx:
            if u >= x:
                a = x
            else:
                b = x
            v, w, x = w, x, u
            fv, fw, fx = fw, fx, fu
        else:
            if u < x:
                a = u
            else:
                b = u
            if fu <= fw or w == x:
                v, w = w, u
                fv, fw = fw, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    return best_x, best_f

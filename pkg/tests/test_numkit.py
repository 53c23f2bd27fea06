import math

import numpy as np
import pytest

from govnav.errors import Infeasible, NoFeasiblePoint, NotHurwitz
from govnav.numkit import (
    FEAS_TOL,
    LmiProblem,
    ScalarBracket,
    SymMatrix,
    VarSpec,
    flatten_values,
    minimize_scalar,
    solve_lmi,
    solve_lyapunov,
    spectral_abscissa,
    sym_eig,
)


def kron_lyapunov(a, rhs):
    """Independent oracle: solve a Q + Q a^T + rhs = 0 by vectorization.

    vec(aQ + Q a^T) = (I kron a + a kron I) vec(Q) with column-major vec;
    numpy reshape is row-major so the roles of the two terms swap.
    """
    n = a.shape[0]
    eye = np.eye(n)
    m = np.kron(eye, a) + np.kron(a, eye)
    q = np.linalg.solve(m, -rhs.reshape(-1))
    return q.reshape(n, n)


def random_hurwitz(rng, n):
    a = rng.standard_normal((n, n))
    shift = np.max(np.linalg.eigvals(a).real)
    return a - (shift + rng.uniform(0.5, 2.0)) * np.eye(n)


class TestSymMatrix:
    def test_symmetrized_on_construction(self):
        m = SymMatrix(np.array([[1.0, 2.0], [0.0, 3.0]]))
        assert np.array_equal(m.entries, m.entries.T)
        assert m.entries[0, 1] == m.entries[1, 0] == 1.0

    def test_positive_definite(self):
        assert SymMatrix.identity(3).is_positive_definite
        assert not SymMatrix.diagonal([1.0, 0.0]).is_positive_definite
        assert not SymMatrix.diagonal([1.0, -1e-6]).is_positive_definite

    def test_sqrt(self):
        s = SymMatrix.diagonal([1.0, 4.0])
        r = s.sqrt()
        assert np.allclose(r.entries @ r.entries, s.entries)


class TestSymEig:
    def test_identity(self):
        vals, _ = sym_eig(SymMatrix.identity(3))
        assert np.allclose(vals, [1.0, 1.0, 1.0])

    def test_diagonal_sorted_axis_aligned(self):
        vals, vecs = sym_eig(SymMatrix.diagonal([2.0, -1.0]))
        assert np.allclose(vals, [-1.0, 2.0])
        assert np.allclose(np.abs(vecs), np.eye(2)[:, ::-1])

    def test_reconstruction_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((6, 6))
        m = SymMatrix(a + a.T)
        vals, vecs = sym_eig(m)
        recon = (vecs * vals) @ vecs.T
        assert np.max(np.abs(recon - m.entries)) < 1e-9 * np.linalg.norm(m.entries)

    def test_orthonormality(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            a = rng.standard_normal((5, 5))
            _, vecs = sym_eig(a + a.T)
            assert np.linalg.norm(vecs.T @ vecs - np.eye(5)) < 1e-9


class TestSpectralAbscissa:
    def test_diagonal(self):
        assert spectral_abscissa(np.diag([-1.0, -3.0, -5.0])) == pytest.approx(-1.0)

    def test_companion_poles(self):
        poles = [-1.0, -1.0, -3.0, -3.0, -5.0, -5.0]
        coeffs = np.poly(poles)  # monic, highest order first
        comp = np.zeros((6, 6))
        comp[0, :] = -coeffs[1:]
        comp[1:, :-1] = np.eye(5)
        # repeated poles make the companion matrix defective; eigenvalue
        # perturbation is O(sqrt(eps)) there, hence the loose tolerance
        assert spectral_abscissa(comp) == pytest.approx(-1.0, abs=1e-6)

    def test_rotation_block(self):
        assert spectral_abscissa(np.array([[0.0, 1.0], [-1.0, 0.0]])) == pytest.approx(
            0.0, abs=1e-12
        )


class TestSolveLyapunov:
    def test_scalar(self):
        q = solve_lyapunov(np.array([[-1.0]]), SymMatrix(np.array([[1.0]])))
        assert q.entries[0, 0] == pytest.approx(0.5)

    def test_decoupled_diagonal(self):
        q = solve_lyapunov(np.diag([-1.0, -2.0]), SymMatrix.identity(2))
        assert np.allclose(q.entries, np.diag([0.5, 0.25]))

    def test_kronecker_oracle_dense(self):
        rng = np.random.default_rng(11)
        a = random_hurwitz(rng, 6)
        w = rng.standard_normal((6, 6))
        rhs = w @ w.T
        q = solve_lyapunov(a, rhs)
        q_ref = kron_lyapunov(a, rhs)
        assert np.max(np.abs(q.entries - q_ref)) < 1e-8
        assert np.min(np.linalg.eigvalsh(q.entries)) > -1e-10

    def test_not_hurwitz_rejected(self):
        with pytest.raises(NotHurwitz):
            solve_lyapunov(np.array([[1.0]]), SymMatrix(np.array([[1.0]])))


def scalar_peak_lmi(b, alpha, z0=0.0, s=1.0):
    """The 1-state peak-bound SDP at a fixed decay rate alpha."""
    sqrt_s = math.sqrt(s)
    specs = [VarSpec("sym", 1), VarSpec("scalar")]
    lmi = lambda p, dlt: np.array(
        [[-2.0 * p[0, 0] + alpha * p[0, 0], p[0, 0] * b], [p[0, 0] * b, -alpha]]
    )
    out = lambda p, dlt: np.array([[p[0, 0], sqrt_s], [sqrt_s, dlt]])
    pd = lambda p, dlt: p
    init = lambda p, dlt: np.array([[1.0 - z0 * p[0, 0] * z0]])
    obj = lambda p, dlt: dlt
    return LmiProblem.from_affine(
        specs, [(lmi, "nsd"), (out, "psd"), (pd, "psd"), (init, "psd")], obj
    )


class TestSolveLmi:
    def test_trivial_scalar_lmi(self):
        # minimize d subject to diag(d - 2, d - 3) >= 0  ->  d = 3
        specs = [VarSpec("scalar")]
        block = lambda d: np.diag([d - 2.0, d - 3.0])
        p = LmiProblem.from_affine(specs, [(block, "psd")], lambda d: d)
        obj, (d,) = solve_lmi(p)
        assert obj == pytest.approx(3.0, abs=1e-5)
        assert d == pytest.approx(3.0, abs=1e-5)

    @pytest.mark.parametrize("b", [0.5, 1.0, 2.0])
    def test_scalar_peak_instance(self, b):
        # analytic optimum of the 2x2 determinant condition:
        # p <= alpha(2 - alpha)/b^2 and delta >= 1/p, so delta* = b^2 at alpha = 1
        p = scalar_peak_lmi(b, alpha=1.0)
        obj, (pm, delta) = solve_lmi(p)
        assert obj == pytest.approx(b * b, rel=1e-5)
        assert pm.entries[0, 0] == pytest.approx(1.0 / b ** 2, rel=1e-4)

    def test_solution_recheck_oracle(self):
        # every returned solution must satisfy both blocks by eigenvalue check
        p = scalar_peak_lmi(1.5, alpha=0.7, z0=2.0)
        obj, values = solve_lmi(p)
        x = flatten_values(values, p.var_specs)
        assert min(p.feasibility_margins(x)) > -FEAS_TOL

    def test_infeasible(self):
        specs = [VarSpec("scalar")]
        blocks = [
            (lambda d: np.array([[d]]), "psd"),
            (lambda d: np.array([[-d - 1.0]]), "psd"),
        ]
        p = LmiProblem.from_affine(specs, blocks, lambda d: d)
        with pytest.raises(Infeasible):
            solve_lmi(p)

    def test_non_affine_rejected(self):
        specs = [VarSpec("scalar")]
        with pytest.raises(ValueError):
            LmiProblem.from_affine(
                specs, [(lambda d: np.array([[d * d]]), "psd")], lambda d: d
            )

    def test_warm_start_matches_cold(self):
        p = scalar_peak_lmi(1.0, alpha=1.0)
        obj_cold, _ = solve_lmi(p)
        x0 = flatten_values([SymMatrix(np.array([[0.5]])), 10.0], p.var_specs)
        obj_warm, _ = solve_lmi(p, x0=x0)
        assert obj_warm == pytest.approx(obj_cold, rel=1e-5, abs=1e-7)


class TestMinimizeScalar:
    def test_quadratic(self):
        x, fx = minimize_scalar(lambda a: (a - 1.0) ** 2, ScalarBracket(0.0, 2.0, 1e-8))
        assert x == pytest.approx(1.0, abs=1e-5)
        assert fx == pytest.approx(0.0, abs=1e-9)

    def test_scalar_bound_profile(self):
        f = lambda a: 1.0 / (a * (2.0 - a)) if 0.0 < a < 2.0 else math.inf
        x, fx = minimize_scalar(f, ScalarBracket(1e-6, 2.0 - 1e-6, 1e-8))
        assert x == pytest.approx(1.0, abs=1e-4)
        assert fx == pytest.approx(1.0, rel=1e-6)

    def test_boundary_limited(self):
        f = lambda a: math.inf if a > 1.5 else 1.0 / a
        x, fx = minimize_scalar(f, ScalarBracket(1e-6, 2.0, 1e-8))
        assert x == pytest.approx(1.5, abs=0.05)
        assert x <= 1.5
        assert fx == pytest.approx(1.0 / x)

    def test_all_infeasible(self):
        with pytest.raises(NoFeasiblePoint):
            minimize_scalar(lambda a: math.inf, ScalarBracket(0.0, 1.0))

    def test_never_leaves_bracket(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            c = rng.uniform(-1.0, 3.0)
            lo, hi = sorted(rng.uniform(-2.0, 4.0, size=2))
            if hi - lo < 1e-3:
                continue
            seen = []
            f = lambda a: (seen.append(a), (a - c) ** 4)[1]
            x, _ = minimize_scalar(f, ScalarBracket(lo, hi, 1e-7))
            assert lo <= x <= hi
            assert all(lo - 1e-12 <= s <= hi + 1e-12 for s in seen)

    def test_grid_refinement_contract(self):
        # result must be within tolerance of a 64-point grid minimum
        f = lambda a: math.sin(3 * a) + 0.5 * a
        br = ScalarBracket(0.0, 4.0, 1e-6)
        x, fx = minimize_scalar(f, br)
        grid = np.linspace(br.lo, br.hi, 64)
        gmin = min(f(g) for g in grid)
        assert fx - gmin <= max(1e-6, 1e-4 * abs(fx))

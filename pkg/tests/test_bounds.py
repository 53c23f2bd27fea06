import math

import numpy as np
import pytest

from govnav.bounds import (
    BoundMethod,
    Ellipsoid,
    LyapBoundOracle,
    RelaxedLinearSystem,
    build_relaxed_system,
    ellipsoid_contains,
    invariant_ellipsoid_check,
    peak_bound_lyap,
    peak_bound_sdp,
)
from govnav.errors import NotHurwitz
from govnav.linearization import (
    AckermannParams,
    ackermann_plant,
    brunovsky_realization,
    gains_from_poles,
)
from govnav.numkit import SymMatrix


def scalar_system(b: float) -> RelaxedLinearSystem:
    return RelaxedLinearSystem(
        np.array([[-1.0]]), gamma=b, delta_w=1.0, s_out=SymMatrix.identity(1)
    )


def random_relaxed(rng, n, m) -> RelaxedLinearSystem:
    a = rng.standard_normal((n, n))
    a -= (np.max(np.linalg.eigvals(a).real) + rng.uniform(0.4, 1.5)) * np.eye(n)
    w = rng.standard_normal((m, m))
    s = w @ w.T + 0.3 * np.eye(m)
    return RelaxedLinearSystem(a, rng.uniform(0.5, 3.0), rng.uniform(0.2, 1.5), SymMatrix(s))


def fig_style_system(s=None) -> tuple[RelaxedLinearSystem, np.ndarray]:
    real = brunovsky_realization([3, 3])
    gains = gains_from_poles(real, [[-1, -3, -5], [-1, -3, -5]])
    s_out = SymMatrix.identity(2) if s is None else s
    sys = build_relaxed_system(real, gains, gamma=10.0, delta_w=0.1, s_out=s_out)
    z0 = np.array([-1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    return sys, z0


class TestBuildRelaxedSystem:
    def test_alpha_bar_from_poles(self):
        sys, _ = fig_style_system()
        assert sys.alpha_bar == pytest.approx(2.0, abs=1e-6)

    def test_unit_disturbance_block(self):
        real = brunovsky_realization([3, 3])
        gains = gains_from_poles(real, [[-1, -3, -5], [-1, -3, -5]])
        sys = build_relaxed_system(real, gains, gamma=10.0, delta_w=0.1,
                                   s_out=SymMatrix.identity(2))
        assert np.allclose(sys.b_bar[:4], 0)
        assert np.allclose(sys.b_bar[4:], np.eye(2))

    def test_output_composition_matches_plant(self):
        plant = ackermann_plant(AckermannParams())
        real = brunovsky_realization([3, 3])
        gains = gains_from_poles(real, [[-1, -2, -3], [-1, -2, -3]])
        sys = build_relaxed_system(real, gains, 10.0, 0.1, SymMatrix.identity(2))
        rng = np.random.default_rng(4)
        for _ in range(20):
            x = rng.uniform([-3, -3, -3, -1, 0.1, -1], [3, 3, 3, 1, 2, 1])
            ztilde = real.t @ plant.coordinate_map(x)
            assert np.allclose(sys.c_bar @ ztilde, plant.output(x), atol=1e-12)

    def test_non_hurwitz_rejected(self):
        with pytest.raises(NotHurwitz):
            RelaxedLinearSystem(np.array([[0.5]]), 1.0, 1.0, SymMatrix.identity(1))


class TestInvariantEllipsoidCheck:
    def test_boundary_tight(self):
        sys = scalar_system(1.0)
        p = SymMatrix(np.array([[1.0 * (2.0 - 1.0)]]))
        assert invariant_ellipsoid_check(sys, p, 1.0)

    def test_too_large_shape_rejected(self):
        sys = scalar_system(1.0)
        assert not invariant_ellipsoid_check(sys, SymMatrix(np.array([[10.0]])), 1.0)

    def test_alpha_zero_with_disturbance(self):
        sys = scalar_system(1.0)
        assert not invariant_ellipsoid_check(sys, SymMatrix(np.array([[0.5]])), 0.0)


class TestScalarAnalytic:
    @pytest.mark.parametrize("b", [0.5, 1.0, 2.0])
    def test_sdp_matches_closed_form(self, b):
        bound = peak_bound_sdp(scalar_system(b), np.zeros(1))
        assert bound.delta == pytest.approx(b * b, abs=1e-5)
        assert bound.alpha_star == pytest.approx(1.0, abs=1e-3)

    @pytest.mark.parametrize("b", [0.5, 1.0, 2.0])
    def test_lyap_matches_closed_form(self, b):
        bound = peak_bound_lyap(scalar_system(b), np.zeros(1))
        assert bound.delta == pytest.approx(b * b, abs=1e-5)
        assert bound.alpha_star == pytest.approx(1.0, abs=1e-3)
        # certificate is the closed-form gramian b^2/(alpha(2-alpha))
        expected_q = b * b / (bound.alpha_star * (2.0 - bound.alpha_star))
        assert bound.certificate.entries[0, 0] == pytest.approx(expected_q, rel=1e-6)

    def test_initial_state_dominates(self):
        x0 = np.array([2.0])
        for fn in (peak_bound_sdp, peak_bound_lyap):
            bound = fn(scalar_system(1.0), x0)
            assert bound.delta == pytest.approx(4.0, rel=1e-4)

    def test_initial_state_below_disturbance_peak(self):
        x0 = np.array([0.3])
        bound = peak_bound_lyap(scalar_system(1.0), x0)
        assert bound.delta == pytest.approx(1.0, rel=1e-4)


class TestCertificates:
    def test_sdp_certificate_rechecks(self):
        sys, z0 = fig_style_system()
        bound = peak_bound_sdp(sys, z0)
        assert bound.method is BoundMethod.SDP
        assert invariant_ellipsoid_check(sys, bound.certificate, bound.alpha_star)
        assert float(z0 @ bound.certificate.entries @ z0) <= 1.0 + 1e-7

    def test_lyap_certificate_residual(self):
        sys, z0 = fig_style_system()
        bound = peak_bound_lyap(sys, z0)
        q = bound.certificate.entries
        a, b = sys.a_bar, sys.b_bar
        alpha = bound.alpha_star
        res = a @ q + q @ a.T + alpha * q + b @ b.T / alpha
        scale = np.linalg.norm(a) * np.linalg.norm(q) + np.linalg.norm(b @ b.T / alpha)
        assert np.linalg.norm(res) < 1e-8 * scale


class TestOrderingAndMonotonicity:
    def test_sdp_never_looser_than_lyap(self):
        rng = np.random.default_rng(12)
        for _ in range(6):
            n = int(rng.integers(3, 6))
            m = int(rng.integers(1, 3))
            sys = random_relaxed(rng, n, m)
            z0 = rng.standard_normal(n)
            d_sdp = peak_bound_sdp(sys, z0).delta
            d_lyap = peak_bound_lyap(sys, z0).delta
            assert d_sdp <= d_lyap + 1e-6

    def test_zero_state_bound_is_smallest(self):
        sys, z0 = fig_style_system()
        for fn in (peak_bound_sdp, peak_bound_lyap):
            assert fn(sys, np.zeros(6)).delta <= fn(sys, 3.0 * z0).delta + 1e-9


class TestEllipsoid:
    def test_unit_ball_center_and_boundary(self):
        ball = Ellipsoid(SymMatrix.identity(2), np.zeros(2))
        assert ellipsoid_contains(ball, np.zeros(2))
        assert ellipsoid_contains(ball, np.array([1.0, 0.0]))

    def test_outside_semi_axis(self):
        e = Ellipsoid(SymMatrix.diagonal([1.0, 0.25]), np.zeros(2))
        assert not ellipsoid_contains(e, np.array([0.0, 2.0001]))
        assert ellipsoid_contains(e, np.array([0.0, 2.0]))


class TestLyapOracle:
    def test_matches_exact_minimization(self):
        sys, z0 = fig_style_system()
        oracle = LyapBoundOracle(sys, grid_points=256)
        exact = peak_bound_lyap(sys, z0)
        fast, alpha = LyapBoundOracle.bound(oracle, sys.c_bar.T @ np.zeros(2) + z0)
        assert fast >= exact.delta - 1e-9
        assert fast == pytest.approx(exact.delta, rel=2e-3)
        assert 0 < alpha < sys.alpha_bar

    def test_ultimate_matches_zero_state(self):
        sys, _ = fig_style_system()
        oracle = LyapBoundOracle(sys, grid_points=256)
        exact = peak_bound_lyap(sys, np.zeros(6))
        assert oracle.ultimate() >= exact.delta - 1e-9
        assert oracle.ultimate() == pytest.approx(exact.delta, rel=2e-3)

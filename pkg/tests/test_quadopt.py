import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fundspan.market import DOMAIN_POSITIVE, DOMAIN_REALS, eval_coefficients
from fundspan.quadopt import (CASE_BOUNDARY, CASE_DEGENERATE, CASE_INTERIOR,
                              CASE_ZERO, BallProblem, brute_force_ball,
                              grid_error_bound, solve_G0, solve_ball,
                              solve_ball_field)
from conftest import make_constant_spec, make_factor_spec


def random_problem(rng, n=None):
    n = n or rng.integers(1, 4)
    alpha = rng.uniform(-2.0, 2.0)
    b = rng.uniform(-1.0, 1.0, n)
    nb = np.linalg.norm(b)
    if nb > 0:
        b *= rng.uniform(0.0, 5.0) / nb
    rho = rng.uniform(0.1, 3.0)
    return BallProblem(alpha=alpha, b=b, rho=rho)


class TestSolveBall:
    def test_interior_half_curvature(self):
        # alpha = 1/2 makes the unconstrained optimum exactly b
        b = np.array([0.3, -0.2])
        sol = solve_ball(BallProblem(alpha=0.5, b=b, rho=1.0))
        assert sol.case_tag == CASE_INTERIOR
        np.testing.assert_array_equal(sol.p, b)
        assert sol.k == 1.0

    def test_boundary_clip(self):
        b = np.array([3.0, 4.0])     # |b| = 5 > rho
        sol = solve_ball(BallProblem(alpha=0.5, b=b, rho=1.0))
        assert sol.case_tag == CASE_BOUNDARY
        np.testing.assert_allclose(sol.p, b / 5.0, rtol=1e-15)
        np.testing.assert_allclose(np.linalg.norm(sol.p), 1.0, rtol=1e-15)

    def test_zero_case(self):
        sol = solve_ball(BallProblem(alpha=0.0, b=np.zeros(3), rho=2.0))
        assert sol.case_tag == CASE_ZERO
        assert sol.objective_value == 0.0
        np.testing.assert_array_equal(sol.p, np.zeros(3))

    def test_degenerate_boundary_tiebreak(self):
        # alpha = -1, b = 0, rho = 2: every |p| = 2 ties at value 4
        d = np.zeros(4)
        d[0] = 1.0
        sol = solve_ball(BallProblem(alpha=-1.0, b=np.zeros(4), rho=2.0),
                         tiebreak=d)
        assert sol.case_tag == CASE_DEGENERATE
        np.testing.assert_array_equal(sol.p, 2.0 * d)
        assert sol.objective_value == pytest.approx(4.0, abs=1e-14)

    def test_negative_curvature_nonzero_b(self):
        b = np.array([1.0, 0.0])
        sol = solve_ball(BallProblem(alpha=-1.0, b=b, rho=1.0))
        assert sol.case_tag == CASE_BOUNDARY
        np.testing.assert_allclose(sol.p, b, rtol=1e-15)
        assert sol.objective_value == pytest.approx(2.0)

    def test_rho_validation(self):
        with pytest.raises(ValueError):
            BallProblem(alpha=1.0, b=np.zeros(2), rho=0.0)

    def test_optimality_certificate(self):
        # closed form beats 10^4 random feasible points
        rng = np.random.default_rng(42)
        for _ in range(25):
            prob = random_problem(rng)
            sol = solve_ball(prob)
            n = prob.b.shape[0]
            q = rng.standard_normal((10_000, n))
            q /= np.linalg.norm(q, axis=1, keepdims=True)
            q *= (rng.uniform(0, 1, 10_000) ** (1 / n) * prob.rho)[:, None]
            vals = -prob.alpha * np.einsum("ij,ij->i", q, q) + q @ prob.b
            assert sol.objective_value >= vals.max() - 1e-10

    def test_collinearity_exact(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            prob = random_problem(rng)
            sol = solve_ball(prob)
            if sol.case_tag == CASE_DEGENERATE:
                continue
            np.testing.assert_array_equal(sol.p, sol.k * prob.b)

    @given(alpha=st.floats(0.05, 2.0), lam=st.floats(0.1, 4.0),
           rho=st.floats(0.5, 3.0),
           b1=st.floats(-0.2, 0.2), b2=st.floats(-0.2, 0.2))
    @settings(max_examples=100, deadline=None)
    def test_scale_covariance_interior(self, alpha, lam, rho, b1, b2):
        # interior case: scaling b scales p linearly while interior
        b = np.array([b1, b2])
        sol = solve_ball(BallProblem(alpha=alpha, b=b, rho=rho))
        scaled = solve_ball(BallProblem(alpha=alpha, b=lam * b, rho=rho))
        if sol.case_tag == CASE_INTERIOR and scaled.case_tag == CASE_INTERIOR:
            np.testing.assert_allclose(scaled.p, lam * sol.p,
                                       rtol=1e-12, atol=1e-15)

    @given(alpha=st.floats(-2.0, 2.0), b1=st.floats(-3.0, 3.0),
           b2=st.floats(-3.0, 3.0),
           rho_lo=st.floats(0.1, 2.0), bump=st.floats(0.01, 2.0))
    @settings(max_examples=150, deadline=None)
    def test_objective_monotone_in_rho(self, alpha, b1, b2, rho_lo, bump):
        b = np.array([b1, b2])
        lo = solve_ball(BallProblem(alpha=alpha, b=b, rho=rho_lo))
        hi = solve_ball(BallProblem(alpha=alpha, b=b, rho=rho_lo + bump))
        assert hi.objective_value >= lo.objective_value - 1e-12

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(3)
        probs = [random_problem(rng, n=2) for _ in range(300)]
        rho = 1.3
        alpha = np.array([p.alpha for p in probs])
        B = np.stack([p.b for p in probs])
        p_vec, kap, case, val = solve_ball_field(alpha, B, rho)
        for i, prob in enumerate(probs):
            sol = solve_ball(BallProblem(alpha=prob.alpha, b=prob.b, rho=rho))
            np.testing.assert_allclose(p_vec[i], sol.p, atol=1e-14)
            assert val[i] == pytest.approx(sol.objective_value, abs=1e-12)
            if sol.case_tag != CASE_DEGENERATE:
                assert kap[i] == pytest.approx(sol.k, abs=1e-14)


class TestBruteForce:
    def test_flat_bowl_optimum_near_zero(self):
        prob = BallProblem(alpha=0.5, b=np.zeros(2), rho=1.0)
        p, val = brute_force_ball(prob, grid_per_axis=21)
        assert np.linalg.norm(p) < 0.15
        assert val <= 0.0

    def test_convex_boundary_case(self):
        # -alpha |p|^2 + p.b = |p|^2 + p1 maximized at (1, 0)
        prob = BallProblem(alpha=-1.0, b=np.array([1.0, 0.0]), rho=1.0)
        p, val = brute_force_ball(prob, grid_per_axis=31)
        np.testing.assert_allclose(p, [1.0, 0.0], atol=0.1)
        assert val == pytest.approx(2.0, abs=0.05)

    def test_dimension_guard(self):
        with pytest.raises(ValueError):
            brute_force_ball(BallProblem(alpha=1.0, b=np.zeros(4), rho=1.0))
        with pytest.raises(ValueError):
            brute_force_ball(BallProblem(alpha=1.0, b=np.zeros(2), rho=1.0),
                             grid_per_axis=5)

    def test_oracle_agreement_random(self):
        rng = np.random.default_rng(11)
        for _ in range(120):
            prob = random_problem(rng)
            sol = solve_ball(prob)
            _, bval = brute_force_ball(prob, grid_per_axis=21)
            eps = grid_error_bound(prob, 21)
            # feasible grid point cannot beat the optimum...
            assert bval <= sol.objective_value + 1e-10
            # ...and the optimum is within the grid resolution of the scan
            assert sol.objective_value <= bval + eps


class TestSolveG0:
    def test_identity_volatility_interior(self):
        spec = make_constant_spec(a=(0.32, 0.12), sig=(1.0, 1.0), r=0.02,
                                  K=100.0, domain=DOMAIN_REALS)
        coeffs = eval_coefficients(spec, [], [], 0.0)
        u, p, kappa, val = solve_G0(J_x=1.0, J_xx=-1.0, J_xy=np.zeros(0),
                                    coeffs=coeffs, K=spec.K,
                                    domain=DOMAIN_REALS)
        np.testing.assert_allclose(u, coeffs.a_tilde, rtol=1e-12)
        assert kappa == pytest.approx(1.0)

    def test_all_derivatives_zero(self):
        spec = make_factor_spec()
        coeffs = eval_coefficients(spec, [0.1], [], 0.3)
        u, p, kappa, val = solve_G0(J_x=0.0, J_xx=0.0, J_xy=np.zeros(1),
                                    coeffs=coeffs, K=spec.K,
                                    domain=DOMAIN_POSITIVE)
        np.testing.assert_array_equal(u, np.zeros(2))
        assert val == 0.0

    def test_log_stationary_point_gives_growth_fraction(self):
        # J(q) = q: J_x = 1, J_xx = 0, curvature 1/2, optimum Q a_tilde
        spec = make_constant_spec(K=100.0)
        coeffs = eval_coefficients(spec, [], [], 0.0)
        u, p, kappa, val = solve_G0(J_x=1.0, J_xx=0.0, J_xy=np.zeros(0),
                                    coeffs=coeffs, K=spec.K,
                                    domain=DOMAIN_POSITIVE)
        Q = np.linalg.inv(coeffs.v @ coeffs.v.T)
        np.testing.assert_allclose(u, Q @ coeffs.a_tilde, rtol=1e-12)
        theta = np.linalg.solve(coeffs.v, coeffs.a_tilde)
        assert val == pytest.approx(0.5 * theta @ theta, rel=1e-12)

    def test_nonfinite_rejected(self):
        spec = make_constant_spec()
        coeffs = eval_coefficients(spec, [], [], 0.0)
        with pytest.raises(ValueError):
            solve_G0(J_x=np.nan, J_xx=0.0, J_xy=np.zeros(0), coeffs=coeffs,
                     K=1.0, domain=DOMAIN_POSITIVE)

    def test_argmax_lies_in_fund_span(self):
        # the control returned at random derivative values stays inside
        # span{psi_1..psi_m, Q a_tilde} (plus the tie-break direction)
        from fundspan.funds import decompose, q_columns

        spec = make_factor_spec()
        rng = np.random.default_rng(5)
        for _ in range(100):
            y = rng.uniform(-0.5, 0.5, 1)
            coeffs = eval_coefficients(spec, y, [], rng.uniform(0, 1))
            J_x = rng.uniform(0.0, 2.0)
            J_xx = rng.uniform(-3.0, 0.5)
            J_xy = rng.uniform(-1.0, 1.0, 1)
            u, p, kappa, val = solve_G0(J_x, J_xx, J_xy, coeffs, spec.K,
                                        DOMAIN_POSITIVE)
            qc = q_columns(coeffs.v)
            psi1 = coeffs.beta_eta @ qc.T
            Q = np.linalg.inv(coeffs.v @ coeffs.v.T)
            psis = np.vstack([psi1, Q @ coeffs.a_tilde])
            dec = decompose(u, psis)
            assert dec.relative_residual <= 1e-10

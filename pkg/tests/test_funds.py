import numpy as np
import pytest

from fundspan.funds import (BASIS_FACTOR, BASIS_STANDARD, FundSet, compute_Q,
                            decompose, fund_directions, mu_of, q_columns,
                            span_residuals)
from fundspan.market import ConstantField, eval_coefficients
from conftest import make_constant_spec, make_factor_spec


def random_well_conditioned(rng, n):
    # diagonally dominant keeps the condition number modest
    v = rng.uniform(-0.5, 0.5, (n, n)) + np.diag(rng.uniform(2.0, 3.0, n))
    return v


class TestQ:
    def test_identity(self):
        np.testing.assert_array_equal(compute_Q(np.eye(3)), np.eye(3))

    def test_diagonal(self):
        Q = compute_Q(np.diag([2.0, 4.0]))
        np.testing.assert_allclose(Q, np.diag([0.25, 0.0625]), rtol=1e-14)

    def test_defining_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            v = random_well_conditioned(rng, rng.integers(1, 6))
            Q = compute_Q(v)
            np.testing.assert_allclose(Q @ (v @ v.T), np.eye(v.shape[0]),
                                       atol=1e-10)

    def test_symmetric_positive_definite(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            v = random_well_conditioned(rng, 4)
            Q = compute_Q(v)
            np.testing.assert_array_equal(Q, Q.T)
            assert np.linalg.eigvalsh(Q)[0] > 0

    def test_ill_conditioned_rejected(self):
        v = np.array([[1.0, 0.0], [0.0, 1e-15]])
        with pytest.raises(ValueError, match="ill-conditioned"):
            compute_Q(v)


class TestQColumns:
    def test_identity(self):
        np.testing.assert_array_equal(q_columns(np.eye(2)), np.eye(2))

    def test_matches_inverse_transpose(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            v = random_well_conditioned(rng, 3)
            np.testing.assert_allclose(q_columns(v), np.linalg.inv(v.T),
                                       rtol=1e-12)

    def test_triangular_hand_case(self):
        v = np.array([[1.0, 1.0], [0.0, 1.0]])
        qc = q_columns(v)
        np.testing.assert_allclose(qc, [[1.0, 0.0], [-1.0, 1.0]], atol=1e-14)
        np.testing.assert_allclose(qc[:, 0], [1.0, -1.0], atol=1e-14)
        np.testing.assert_allclose(qc[:, 1], [0.0, 1.0], atol=1e-14)

    def test_Qv_equals_inverse_transpose(self):
        # the pivot identity: Q v = (v')^-1, columns are the q_i
        rng = np.random.default_rng(3)
        for _ in range(100):
            v = random_well_conditioned(rng, rng.integers(1, 6))
            lhs = compute_Q(v) @ v
            rel = np.linalg.norm(lhs - q_columns(v)) / np.linalg.norm(lhs)
            assert rel <= 1e-10


class TestFundDirections:
    def test_single_fund_is_growth_portfolio(self):
        spec = make_constant_spec()
        c = eval_coefficients(spec, [], [], 0.0)
        psi, tag = fund_directions(c)
        assert tag == BASIS_FACTOR
        assert psi.shape == (1, 2)
        np.testing.assert_allclose(psi[0], compute_Q(c.v) @ c.a_tilde,
                                   rtol=1e-12)

    def test_identity_vol_unit_loading_row(self):
        spec = make_factor_spec(
            n=3,
            appreciation=ConstantField(np.array([0.07, 0.05, 0.04])),
            volatility=ConstantField(np.eye(3)),
            eta_stock_loadings=ConstantField(np.array([[1.0, 0.0, 0.0]])))
        c = eval_coefficients(spec, [0.0], [], 0.0)
        psi, tag = fund_directions(c)
        assert tag == BASIS_FACTOR
        np.testing.assert_allclose(psi[0], [1.0, 0.0, 0.0], atol=1e-14)

    def test_hand_combination_with_triangular_vol(self):
        # v = [[1,1],[0,1]], loadings (1, 2): q1 + 2 q2 = (1, 1)
        spec = make_factor_spec(
            volatility=ConstantField(np.array([[1.0, 1.0], [0.0, 1.0]])),
            eta_stock_loadings=ConstantField(np.array([[1.0, 2.0]])))
        c = eval_coefficients(spec, [0.0], [], 0.0)
        qc = q_columns(c.v)
        psi1 = c.beta_eta @ qc.T
        np.testing.assert_allclose(psi1[0], [1.0, 1.0], atol=1e-14)

    def test_standard_basis_when_factors_saturate(self):
        # m + 1 >= n: the first n basis vectors span everything
        spec = make_factor_spec()      # m=1, n=2
        c = eval_coefficients(spec, [0.0], [], 0.0)
        psi, tag = fund_directions(c)
        assert tag == BASIS_STANDARD
        np.testing.assert_array_equal(psi, np.eye(2))

    def test_mu_and_tag_via_fundset(self, factor_span_bundle):
        fs = FundSet(factor_span_bundle.spec)
        assert fs.mu == 2
        assert fs.basis_tag == BASIS_FACTOR
        psi = fs.directions_at([0.2], [], 0.5)
        assert psi.shape == (2, 4)
        assert np.all(np.isfinite(psi))

    def test_scaling_excess_rate_scales_last_fund_only(self,
                                                       factor_span_bundle):
        spec = factor_span_bundle.spec
        c = eval_coefficients(spec, [0.1], [], 0.0)
        psi, _ = fund_directions(c)
        lam = 3.5
        import dataclasses
        scaled = dataclasses.replace(c, a_tilde=lam * c.a_tilde)
        psi2, _ = fund_directions(scaled)
        np.testing.assert_allclose(psi2[-1], lam * psi[-1], rtol=1e-12)
        np.testing.assert_array_equal(psi2[:-1], psi[:-1])

    def test_directions_linearly_independent(self, factor_span_bundle):
        spec = factor_span_bundle.spec
        rng = np.random.default_rng(4)
        for _ in range(20):
            c = eval_coefficients(spec, rng.uniform(-0.6, 0.6, 1), [],
                                  rng.uniform(0, 1))
            psi, _ = fund_directions(c)
            s = np.linalg.svd(psi, compute_uv=False)
            assert s[-1] > 1e-6

    def test_export_csv(self, tmp_path, factor_span_bundle):
        fs = FundSet(factor_span_bundle.spec)
        out = tmp_path / "funds.csv"
        fs.export_csv(str(out), y_values=[-0.2, 0.0, 0.2], z_values=[[]],
                      t_values=[0.0, 0.5])
        lines = out.read_text().splitlines()
        assert lines[0].startswith("t,y1,psi1_1")
        assert len(lines) == 1 + 3 * 2


class TestDecompose:
    def test_single_fund_multiple(self):
        psi = np.array([[1.0, 2.0, -1.0]])
        dec = decompose(3.0 * psi[0], psi)
        np.testing.assert_allclose(dec.coefficients, [3.0], rtol=1e-14)
        assert dec.residual_norm < 1e-14

    def test_orthogonal_vector_full_residual(self):
        psi = np.array([[1.0, 0.0]])
        dec = decompose(np.array([0.0, 1.0]), psi)
        assert dec.residual_norm == pytest.approx(1.0)
        assert dec.relative_residual == pytest.approx(1.0)

    def test_round_trip_two_funds(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            psi = rng.standard_normal((2, 5))
            nu = rng.standard_normal(2)
            dec = decompose(nu @ psi, psi)
            np.testing.assert_allclose(dec.coefficients, nu, atol=1e-9)
            assert dec.residual_norm <= 1e-12 * max(1, np.linalg.norm(nu @ psi))

    def test_zero_vector_zero_relative_residual(self):
        dec = decompose(np.zeros(3), np.array([[1.0, 0.0, 0.0]]))
        assert dec.relative_residual == 0.0

    def test_rank_deficient_minimum_norm(self):
        psi = np.array([[1.0, 0.0], [2.0, 0.0]])   # parallel funds
        dec = decompose(np.array([3.0, 0.0]), psi)
        assert dec.residual_norm < 1e-12
        # minimum-norm solution spreads over both rows
        assert np.linalg.norm(dec.coefficients) <= 3.0

    def test_batch_residuals(self):
        psi = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        U = np.array([[2.0, 3.0, 0.0], [0.0, 0.0, 1.0]])
        res = span_residuals(U, psi)
        np.testing.assert_allclose(res, [0.0, 1.0], atol=1e-12)


class TestMu:
    def test_single_index_market(self):
        assert mu_of(1, 5) == 2

    def test_classical(self):
        assert mu_of(0, 1) == 1

    def test_clamped_at_stock_count(self):
        assert mu_of(9, 4) == 4

    def test_invalid(self):
        with pytest.raises(ValueError):
            mu_of(-1, 3)
        with pytest.raises(ValueError):
            mu_of(0, 0)

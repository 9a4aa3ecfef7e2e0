import numpy as np
import pytest

from fundspan.funds import fund_directions
from fundspan.hjb import Utility
from fundspan.market import DOMAIN_REALS, eval_coefficients, simulate_paths
from fundspan.policyeval import (ConstantControl, FundRuleStrategy,
                                 GridPolicyStrategy, McParams,
                                 PerturbedStrategy, ZeroStrategy,
                                 constant_fraction_value,
                                 epsilon_optimality_report, evaluate,
                                 merton_oracle, span_complement_basis)
from conftest import make_constant_spec, make_factor_spec


class TestEvaluate:
    def test_zero_strategy_exact_floor(self):
        # x0 = 1: U(x0) = 0, exact to the bit
        spec = make_constant_spec(x0=1.0)
        r = evaluate(spec, ZeroStrategy(2), Utility.log(), steps=50,
                     paths=500, seed=0)
        assert r.mean_utility == 0.0
        assert r.std_error == 0.0
        assert r.excluded_paths == 0 and not r.flagged
        # generic x0: exact up to the rounding of averaging 500 copies
        spec2 = make_constant_spec(x0=2.0)
        r2 = evaluate(spec2, ZeroStrategy(2), Utility.log(), steps=50,
                      paths=500, seed=0)
        assert r2.mean_utility == pytest.approx(np.log(2.0), rel=1e-15)
        assert r2.std_error <= 1e-16

    def test_growth_fraction_hits_closed_form(self):
        spec = make_constant_spec()
        ut = Utility.log()
        oracle = merton_oracle(spec, ut)
        r = evaluate(spec, ConstantControl(oracle.fraction), ut, steps=100,
                     paths=40000, seed=3)
        assert abs(r.mean_utility - oracle.value(spec.x0)) <= 3 * r.std_error

    def test_oversized_fraction_strictly_worse(self):
        spec = make_constant_spec()
        ut = Utility.log()
        oracle = merton_oracle(spec, ut)
        bad_frac = 10.0 * oracle.fraction
        good = evaluate(spec, ConstantControl(oracle.fraction), ut, 100,
                        20000, seed=4)
        bad = evaluate(spec, ConstantControl(bad_frac), ut, 100, 20000,
                       seed=4)
        assert bad.mean_utility < good.mean_utility \
            - 3 * (bad.std_error + good.std_error)
        # and it lands on its own closed form
        expect = constant_fraction_value(spec, ut, bad_frac)
        assert abs(bad.mean_utility - expect) <= 4 * bad.std_error

    def test_no_nan_for_positive_domain(self):
        spec = make_factor_spec()
        r = evaluate(spec, ConstantControl(np.array([3.0, 2.0])),
                     Utility.power(-1.0), steps=50, paths=2000, seed=5)
        assert np.isfinite(r.mean_utility)
        assert r.excluded_paths == 0

    def test_common_random_numbers_reproducible(self):
        spec = make_constant_spec()
        ut = Utility.log()
        a1 = evaluate(spec, ConstantControl(np.array([1.0, 0.5])), ut, 50,
                      4000, seed=11)
        a2 = evaluate(spec, ConstantControl(np.array([1.0, 0.5])), ut, 50,
                      4000, seed=11)
        assert a1.mean_utility == a2.mean_utility


class TestMertonOracle:
    def test_zero_premium_means_zero_fraction(self):
        spec = make_constant_spec(a=(0.02, 0.02), r=0.02)
        for ut in (Utility.log(), Utility.power(0.5)):
            o = merton_oracle(spec, ut)
            np.testing.assert_allclose(o.fraction, 0.0, atol=1e-15)
            assert o.value(3.0) == pytest.approx(float(ut.value(3.0)))

    def test_single_stock_hand_numbers(self):
        spec = make_constant_spec(n=1, a=(0.06,), sig=(0.2,), r=0.02)
        o = merton_oracle(spec, Utility.log())
        assert o.fraction[0] == pytest.approx(1.0)
        o2 = merton_oracle(spec, Utility.power(0.5))
        assert o2.fraction[0] == pytest.approx(2.0)

    def test_refuses_state_dependent_market(self):
        with pytest.raises(ValueError, match="constant"):
            merton_oracle(make_factor_spec(), Utility.log())

    def test_refuses_other_utilities(self):
        spec = make_constant_spec(domain=DOMAIN_REALS)
        with pytest.raises(ValueError):
            merton_oracle(spec, Utility.capped_linear_quadratic(
                0.25, 1.0, domain=DOMAIN_REALS))


class TestStrategies:
    def test_grid_policy_matches_constant_solution(self, solved_merton_log):
        b, grid, value, policy = solved_merton_log
        strat = GridPolicyStrategy(policy)
        oracle = merton_oracle(b.spec, b.utility)
        x = np.array([0.0, 0.3, -1.0])
        got = strat.control(x, np.zeros((3, 0)), np.zeros((3, 0)), 0.5)
        np.testing.assert_allclose(
            got, np.tile(oracle.fraction, (3, 1)), rtol=1e-6)

    def test_grid_policy_clamps_outside_box(self, solved_merton_log):
        b, grid, value, policy = solved_merton_log
        strat = GridPolicyStrategy(policy)
        inside = strat.control(np.array([grid.x_hi - 1e-9]),
                               np.zeros((1, 0)), np.zeros((1, 0)), 0.0)
        outside = strat.control(np.array([grid.x_hi + 5.0]),
                                np.zeros((1, 0)), np.zeros((1, 0)), 0.0)
        np.testing.assert_allclose(outside, inside, rtol=1e-9)

    def test_fund_rule_reproduces_growth_policy(self):
        spec = make_constant_spec()
        rule = FundRuleStrategy(spec, lambda x, y, z, t: np.ones((len(x), 1)))
        c = eval_coefficients(spec, [], [], 0.0)
        psi, _ = fund_directions(c)
        got = rule.control(np.zeros(3), np.zeros((3, 0)), np.zeros((3, 0)),
                           0.0)
        np.testing.assert_allclose(got, np.tile(psi[0], (3, 1)), rtol=1e-12)

    def test_perturbation_is_off_span(self, solved_merton_log):
        b, grid, value, policy = solved_merton_log
        W = span_complement_basis(b.spec)
        assert W.shape == (2, 1)
        c = eval_coefficients(b.spec, [], [], 0.0)
        psi, _ = fund_directions(c)
        assert abs(psi[0] @ W[:, 0]) <= 1e-12
        base = GridPolicyStrategy(policy)
        pert = PerturbedStrategy(base, W[:, 0], weight=0.5)
        x = np.zeros(4)
        u0 = base.control(x, np.zeros((4, 0)), np.zeros((4, 0)), 0.1)
        u1 = pert.control(x, np.zeros((4, 0)), np.zeros((4, 0)), 0.1)
        delta = u1 - u0
        np.testing.assert_allclose(np.linalg.norm(delta, axis=1),
                                   0.5 * np.linalg.norm(u0, axis=1),
                                   rtol=1e-12)

    def test_admissibility_sup_recorded(self):
        spec = make_constant_spec()
        bundle = simulate_paths(spec, ConstantControl(np.array([1.5, 0.5])),
                                steps=20, paths=50, seed=0,
                                record="terminal")
        np.testing.assert_allclose(bundle.control_sup,
                                   np.hypot(1.5, 0.5), rtol=1e-12)


@pytest.fixture(scope="module")
def small_report(merton_log_bundle):
    b = merton_log_bundle
    grid = b.build_grid()
    return b, epsilon_optimality_report(
        b.spec, b.utility, grid,
        mc=McParams(steps=120, paths=8000, seed=21))


class TestOptimalityReport:

    def test_gap_within_budget(self, small_report):
        b, rep = small_report
        assert rep.gap_within_budget
        assert rep.oracle_gap <= rep.epsilon_budget

    def test_perturbations_all_lower(self, small_report):
        b, rep = small_report
        assert rep.perturbations_all_lower
        pert_rows = [r for r in rep.rows if r.name.startswith("off_span")]
        assert len(pert_rows) == 5
        for r in pert_rows:
            assert r.delta_vs_policy < 0
            assert -r.delta_vs_policy > 3 * r.paired_se

    def test_zero_floor_row_exact(self, small_report):
        b, rep = small_report
        row = [r for r in rep.rows if r.name == "zero_floor"][0]
        assert row.mean == pytest.approx(np.log(b.spec.x0), abs=0.0)

    def test_render_and_csv(self, small_report, tmp_path):
        _, rep = small_report
        text = rep.to_text()
        assert "PASS" in text and "epsilon budget" in text
        out = tmp_path / "rep.csv"
        rep.to_csv(str(out))
        content = out.read_text()
        assert content.startswith("# spec_hash,")
        assert "hjb_policy" in content

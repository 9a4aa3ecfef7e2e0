import numpy as np
import pytest

from fundspan.hjb import solve_bellman
from fundspan.market import (DOMAIN_POSITIVE, AffineField, ConstantField,
                             MarketSpec, OUDriftField)
from fundspan.scenario import preset_bundle


def make_constant_spec(n=2, a=(0.10, 0.06), sig=(0.20, 0.25), r=0.02,
                       K=1.5, T=1.0, x0=1.0, domain=DOMAIN_POSITIVE):
    return MarketSpec(
        n=n, m=0, M=0, N=0, K=K, T=T, x0=x0, eta0=[], zeta0=[],
        domain=domain,
        rate=ConstantField(np.float64(r)),
        appreciation=ConstantField(np.asarray(a, dtype=np.float64)),
        volatility=ConstantField(np.diag(sig).astype(np.float64)),
    )


def make_factor_spec(**overrides):
    """m=1, n=2 market with affine appreciation and an OU factor."""
    kwargs = dict(
        n=2, m=1, M=0, N=0, K=1.5, T=1.0, x0=1.0, eta0=[0.0], zeta0=[],
        domain=DOMAIN_POSITIVE,
        rate=ConstantField(np.float64(0.02)),
        appreciation=AffineField(base=np.array([0.09, 0.06]),
                                 wrt_y=np.array([[0.04], [0.02]]),
                                 wrt_z=np.zeros((2, 0))),
        volatility=ConstantField(np.array([[0.20, 0.00], [0.03, 0.25]])),
        eta_drift=OUDriftField(rate=np.array([1.0]), mean=np.array([0.0]),
                               target="eta"),
        eta_stock_loadings=ConstantField(np.array([[0.15, 0.08]])),
        eta_noise_loadings=ConstantField(np.zeros((1, 0))),
    )
    kwargs.update(overrides)
    return MarketSpec(**kwargs)


@pytest.fixture(scope="session")
def merton_log_bundle():
    return preset_bundle("merton_log")


@pytest.fixture(scope="session")
def merton_power_bundle():
    return preset_bundle("merton_power")


@pytest.fixture(scope="session")
def factor_span_bundle():
    return preset_bundle("factor_span")


@pytest.fixture(scope="session")
def solved_merton_log(merton_log_bundle):
    b = merton_log_bundle
    grid = b.build_grid()
    value, policy = solve_bellman(b.spec, b.utility, grid)
    return b, grid, value, policy


@pytest.fixture(scope="session")
def solved_merton_power(merton_power_bundle):
    b = merton_power_bundle
    grid = b.build_grid()
    value, policy = solve_bellman(b.spec, b.utility, grid)
    return b, grid, value, policy


@pytest.fixture(scope="session")
def solved_factor_span(factor_span_bundle):
    b = factor_span_bundle
    grid = b.build_grid()
    value, policy = solve_bellman(b.spec, b.utility, grid)
    return b, grid, value, policy

"""Monte Carlo policy evaluation and the sub-optimality report.

Strategies expose control(x, y, z, t) vectorized over paths; the value of
a strategy is the Monte Carlo mean of U(terminal discounted wealth).
Evaluating different strategies under the same seed reuses the identical
Gaussian increments (common random numbers), so pathwise value
differences carry far less variance than the individual estimates; the
report uses the paired standard error for strategy comparisons and the
conservative sum of marginal errors for the oracle gap budget.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .funds import FundSet, fund_directions
from .hjb import (Grid, PolicyGrid, Utility, convergence_study,
                  minimum_stable_steps, solve_bellman)
from .market import (DOMAIN_POSITIVE, ConstantField, MarketSpec,
                     eval_coefficients, simulate_paths)

Array = NDArray[np.float64]


# ---------------------------------------------------------------------------
# Strategy kinds
# ---------------------------------------------------------------------------

class ZeroStrategy:
    """Everything in the bank account."""

    name = "zero"

    def __init__(self, n: int):
        self.n = n

    def control(self, x, y, z, t):
        return np.zeros((np.asarray(x).shape[0], self.n))


class ConstantControl:
    """Fixed control vector: amounts on the real domain, wealth fractions
    on the positive domain."""

    def __init__(self, vector, name: str = "constant"):
        self.vector = np.asarray(vector, dtype=np.float64)
        self.name = name

    def control(self, x, y, z, t):
        return np.broadcast_to(self.vector,
                               (np.asarray(x).shape[0], self.vector.shape[0]))


class GridPolicyStrategy:
    """Solved HJB policy, multilinear in space, left-constant in time.

    Queries outside the grid box are clamped to it, which keeps the
    interpolated control Lipschitz and inside the constraint set whenever
    the node values are.
    """

    name = "hjb_policy"

    def __init__(self, policy: PolicyGrid):
        from scipy.interpolate import RegularGridInterpolator

        self.policy = policy
        grid = policy.grid
        self._axes = grid.axes
        self._lo = np.array([a[0] for a in self._axes])
        self._hi = np.array([a[-1] for a in self._axes])
        self._interp = [
            RegularGridInterpolator(tuple(self._axes), policy.u[i],
                                    method="linear", bounds_error=False,
                                    fill_value=None)
            for i in range(policy.u.shape[0])
        ]

    def control(self, x, y, z, t):
        si = self.policy.slice_at(float(t))
        cols = [np.asarray(x, dtype=np.float64)]
        y = np.asarray(y, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        cols += [y[:, k] for k in range(y.shape[1])]
        cols += [z[:, k] for k in range(z.shape[1])]
        pts = np.stack(cols, axis=-1)
        np.clip(pts, self._lo, self._hi, out=pts)
        return self._interp[si](pts)


class FundRuleStrategy:
    """Adapted scalar loadings on the fund directions.

    loadings(x, y, z, t) must return (paths, mu); the control is the
    matching combination of the fund directions evaluated pathwise.
    """

    name = "fund_rule"

    def __init__(self, spec: MarketSpec, loadings: Callable):
        self.spec = spec
        self.loadings = loadings
        self.fund_set = FundSet(spec)

    def control(self, x, y, z, t):
        nu = np.asarray(self.loadings(x, y, z, t), dtype=np.float64)
        out = np.empty((nu.shape[0], self.spec.n))
        for i in range(nu.shape[0]):
            coeffs = eval_coefficients(self.spec, y[i], z[i], float(t))
            psi, _ = fund_directions(coeffs)
            out[i] = nu[i] @ psi
        return out


class PerturbedStrategy:
    """Base strategy plus an off-span component of relative size `weight`.

    `direction` must be a unit vector orthogonal to the fund span; the
    added component is weight * |u(state)| * direction, so the distortion
    scales with the local control.
    """

    def __init__(self, base, direction, weight: float = 0.5,
                 name: str = "perturbed"):
        self.base = base
        self.direction = np.asarray(direction, dtype=np.float64)
        self.weight = weight
        self.name = name

    def control(self, x, y, z, t):
        u = np.asarray(self.base.control(x, y, z, t), dtype=np.float64)
        norms = np.linalg.norm(u, axis=1, keepdims=True)
        return u + self.weight * norms * self.direction


def span_complement_basis(spec: MarketSpec, y=None, z=None, t: float = 0.0):
    """Orthonormal basis of the orthogonal complement of the fund span
    at one factor point (defaults to the initial state)."""
    if y is None:
        y = spec.eta0
    if z is None:
        z = spec.zeta0
    coeffs = eval_coefficients(spec, y, z, t)
    psi, _ = fund_directions(coeffs)
    _, s, vt = np.linalg.svd(psi)
    rank = int(np.sum(s > 1e-12 * max(s[0], 1e-300)))
    return vt[rank:].T     # (n, n - rank)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    mean_utility: float
    std_error: float
    path_count: int
    excluded_paths: int
    seed: int
    flagged: bool
    control_sup: float        # max |control| seen along any path

    def __str__(self):
        flag = "  [FLAGGED: exclusions]" if self.flagged else ""
        return (f"mean={self.mean_utility:.6f} se={self.std_error:.2e} "
                f"paths={self.path_count} excluded={self.excluded_paths}{flag}")


def _terminal_utilities(spec, strategy, utility, steps, paths, seed):
    bundle = simulate_paths(spec, strategy, steps=steps, paths=paths,
                            seed=seed, record="terminal")
    if spec.domain == DOMAIN_POSITIVE:
        # evaluate on the log coordinate directly: exp-then-log round trips
        # would cost an ulp and log/power never leave their domain this way
        u = np.asarray(utility.terminal_grid_values(bundle.x),
                       dtype=np.float64)
    else:
        u = np.asarray(utility.value(bundle.x), dtype=np.float64)
    good = np.isfinite(u)
    dropped = int((~good).sum())
    return u[good], bundle.excluded_paths + dropped, bundle

def evaluate(spec: MarketSpec, strategy, utility: Utility, steps: int,
             paths: int, seed: int) -> EvalResult:
    """Monte Carlo estimate of E U(discounted terminal wealth)."""
    u, excluded, bundle = _terminal_utilities(spec, strategy, utility,
                                              steps, paths, seed)
    count = int(u.size)
    mean = float(u.mean()) if count else np.nan
    se = float(u.std(ddof=1) / np.sqrt(count)) if count > 1 else 0.0
    return EvalResult(mean_utility=mean, std_error=se, path_count=count,
                      excluded_paths=excluded, seed=seed,
                      flagged=excluded > 1e-3 * paths,
                      control_sup=float(bundle.control_sup.max(initial=0.0)))


# ---------------------------------------------------------------------------
# Closed-form oracle for constant coefficients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MertonOracle:
    fraction: Array            # optimal wealth fraction, constant
    theta: Array               # market price of risk v^-1 a_tilde
    utility: Utility
    T: float

    def value(self, x, t: float = 0.0):
        """Exact value function in wealth units."""
        x = np.asarray(x, dtype=np.float64)
        tau = self.T - t
        th2 = float(self.theta @ self.theta)
        if self.utility.family == "log":
            return np.log(x) + 0.5 * th2 * tau
        d = self.utility.delta
        return (np.power(x, d) / d
                * np.exp(d * th2 * tau / (2.0 * (1.0 - d))))

    def value_grid_coord(self, xc, t: float = 0.0):
        """Value on the solver's wealth coordinate (q on positive domain)."""
        xc = np.asarray(xc, dtype=np.float64)
        return self.value(np.exp(xc), t)


def merton_oracle(spec: MarketSpec, utility: Utility) -> MertonOracle:
    """Closed-form optimum for constant (a, v, r); log and power only.

    fraction = Q a_tilde (log) or Q a_tilde / (1 - delta) (power);
    the value function grows with |theta|^2 = |v^-1 a_tilde|^2.
    """
    for name in ("appreciation", "volatility", "rate"):
        if not isinstance(getattr(spec, name), ConstantField):
            raise ValueError(
                f"oracle needs a constant {name} coefficient family")
    if utility.family not in ("log", "power"):
        raise ValueError("oracle covers log and power utilities")
    coeffs = eval_coefficients(spec, spec.eta0, spec.zeta0, 0.0)
    theta = np.linalg.solve(coeffs.v, coeffs.a_tilde)
    q_a = np.linalg.solve(coeffs.v.T, theta)      # Q a_tilde
    if utility.family == "log":
        frac = q_a
    else:
        frac = q_a / (1.0 - utility.delta)
    return MertonOracle(fraction=frac, theta=theta, utility=utility, T=spec.T)


def constant_fraction_value(spec: MarketSpec, utility: Utility, frac) -> float:
    """Exact value of a constant-fraction strategy under constant
    coefficients on the positive domain; used as a test oracle."""
    coeffs = eval_coefficients(spec, spec.eta0, spec.zeta0, 0.0)
    frac = np.asarray(frac, dtype=np.float64)
    Sig = coeffs.v @ coeffs.v.T
    drift = float(frac @ coeffs.a_tilde - 0.5 * frac @ Sig @ frac)
    var = float(frac @ Sig @ frac)
    q0 = np.log(spec.x0)
    if utility.family == "log":
        return q0 + drift * spec.T
    d = utility.delta
    return float(np.exp(d * (q0 + drift * spec.T)
                        + 0.5 * d * d * var * spec.T) / d)


# ---------------------------------------------------------------------------
# Sub-optimality report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class McParams:
    steps: int = 250
    paths: int = 100_000
    seed: int = 20260810


@dataclass
class ReportRow:
    name: str
    mean: float
    std_error: float
    excluded: int
    delta_vs_policy: float = np.nan
    paired_se: float = np.nan
    verdict: str = ""


@dataclass
class OptimalityReport:
    rows: list
    epsilon_budget: float
    c_disc: float
    h: float
    dt: float
    oracle_gap: float
    gap_within_budget: Optional[bool]
    perturbations_all_lower: Optional[bool]
    spec_hash: str
    seed: int
    grid_descriptor: str
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        checks = [c for c in (self.gap_within_budget,
                              self.perturbations_all_lower) if c is not None]
        return all(checks) if checks else True

    def to_text(self) -> str:
        lines = [
            f"spec_hash: {self.spec_hash}",
            f"seed: {self.seed}",
            f"grid: {self.grid_descriptor}",
            f"epsilon budget: {self.epsilon_budget:.6g} "
            f"(C_disc={self.c_disc:.4g}, h={self.h:.4g}, dt={self.dt:.4g})",
            "",
            f"{'strategy':<22} {'mean':>12} {'stderr':>10} "
            f"{'d_vs_policy':>12} {'paired_se':>10} verdict",
        ]
        for r in self.rows:
            dv = "" if np.isnan(r.delta_vs_policy) else f"{r.delta_vs_policy:12.6f}"
            ps = "" if np.isnan(r.paired_se) else f"{r.paired_se:10.2e}"
            lines.append(f"{r.name:<22} {r.mean:12.6f} {r.std_error:10.2e} "
                         f"{dv:>12} {ps:>10} {r.verdict}")
        lines.append("")
        if self.gap_within_budget is not None:
            lines.append(f"|V_policy - V_oracle| <= budget: "
                         f"{'PASS' if self.gap_within_budget else 'FAIL'} "
                         f"(gap {self.oracle_gap:.6g})")
        if self.perturbations_all_lower is not None:
            lines.append(f"all off-span perturbations lower by > 3 paired SE: "
                         f"{'PASS' if self.perturbations_all_lower else 'FAIL'}")
        for n in self.notes:
            lines.append(f"note: {n}")
        lines.append("overall: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)

    def to_csv(self, path_or_buf) -> None:
        close = False
        if isinstance(path_or_buf, (str, bytes)):
            fh = open(path_or_buf, "w", newline="")
            close = True
        else:
            fh = path_or_buf
        fh.write(f"# spec_hash,{self.spec_hash}\n")
        fh.write(f"# seed,{self.seed}\n")
        fh.write(f"# grid,{self.grid_descriptor}\n")
        fh.write("name,mean,std_error,excluded,delta_vs_policy,paired_se,verdict\n")
        for r in self.rows:
            fh.write(f"{r.name},{r.mean!r},{r.std_error!r},{r.excluded},"
                     f"{r.delta_vs_policy!r},{r.paired_se!r},{r.verdict}\n")
        fh.write(f"epsilon_budget,{self.epsilon_budget!r}\n")
        fh.write(f"oracle_gap,{self.oracle_gap!r}\n")
        fh.write(f"passed,{self.passed}\n")
        if close:
            fh.close()


def spec_fingerprint(spec: MarketSpec) -> str:
    return hashlib.sha256(repr(spec).encode()).hexdigest()[:16]


def epsilon_optimality_report(spec: MarketSpec, utility: Utility, grid: Grid,
                              mc: McParams = McParams(),
                              n_perturbations: int = 5,
                              perturbation_weight: float = 0.5,
                              coarse_factors: Sequence[float] = (0.25, 0.5),
                              spec_hash: Optional[str] = None) -> OptimalityReport:
    """Evaluate the solved grid policy against the closed-form optimum and
    against off-span perturbations, under common random numbers.

    The oracle gap must fit inside 3 (SE_a + SE_b) + C_disc (h + dt) where
    C_disc comes from a small convergence study on coarser grids; every
    perturbed policy must score lower than the fund policy by more than
    three paired standard errors.
    """
    value, policy = solve_bellman(spec, utility, grid)
    policy_strategy = GridPolicyStrategy(policy)
    notes = []

    oracle = None
    try:
        oracle = merton_oracle(spec, utility)
    except ValueError as exc:
        notes.append(f"no closed-form oracle: {exc}")

    c_disc = 0.0
    if oracle is not None:
        coarse = []
        for f in coarse_factors:
            nodes = max(15, int(round(grid.x_nodes * f)) | 1)
            g = Grid(x_lo=grid.x_lo, x_hi=grid.x_hi, x_nodes=nodes,
                     y_axes=tuple((lo, hi, max(9, int(round(k * f)) | 1))
                                  for lo, hi, k in grid.y_axes),
                     z_axes=tuple((lo, hi, max(9, int(round(k * f)) | 1))
                                  for lo, hi, k in grid.z_axes),
                     t_steps=1, T=grid.T)
            g = Grid(x_lo=g.x_lo, x_hi=g.x_hi, x_nodes=g.x_nodes,
                     y_axes=g.y_axes, z_axes=g.z_axes,
                     t_steps=minimum_stable_steps(spec, g), T=grid.T)
            coarse.append(g)
        study = convergence_study(spec, utility, coarse + [grid],
                                  oracle.value_grid_coord)
        c_disc = study.C_disc

    # common-seed evaluations, keeping per-path utilities for pairing
    def run(strategy):
        u, excluded, bundle = _terminal_utilities(
            spec, strategy, utility, mc.steps, mc.paths, mc.seed)
        return u, excluded

    u_pol, exc_pol = run(policy_strategy)
    rows = [ReportRow(name="hjb_policy", mean=float(u_pol.mean()),
                      std_error=float(u_pol.std(ddof=1) / np.sqrt(u_pol.size)),
                      excluded=exc_pol)]

    gap = np.nan
    gap_ok = None
    se_budget = np.nan
    if oracle is not None:
        u_or, exc_or = run(ConstantControl(oracle.fraction, name="oracle"))
        se_a = rows[0].std_error
        se_b = float(u_or.std(ddof=1) / np.sqrt(u_or.size))
        gap = abs(float(u_pol.mean()) - float(u_or.mean()))
        se_budget = 3.0 * (se_a + se_b) + c_disc * (grid.spacings[0] + grid.dt)
        gap_ok = bool(gap <= se_budget)
        row = ReportRow(name="oracle_fraction", mean=float(u_or.mean()),
                        std_error=se_b, excluded=exc_or,
                        delta_vs_policy=float(u_or.mean() - u_pol.mean()))
        if exc_or == 0 and exc_pol == 0 and u_or.size == u_pol.size:
            row.paired_se = float((u_or - u_pol).std(ddof=1)
                                  / np.sqrt(u_or.size))
        rows.append(row)

    W = span_complement_basis(spec)
    pert_ok: Optional[bool] = None
    if W.shape[1] == 0:
        notes.append("fund span is full-dimensional; no off-span directions")
    else:
        pert_ok = True
        prng = np.random.default_rng(mc.seed)
        for i in range(n_perturbations):
            mix = prng.standard_normal(W.shape[1])
            direction = W @ (mix / np.linalg.norm(mix))
            pert = PerturbedStrategy(policy_strategy, direction,
                                     weight=perturbation_weight,
                                     name=f"off_span_{i + 1}")
            u_p, exc_p = run(pert)
            delta = float(u_p.mean() - u_pol.mean())
            row = ReportRow(name=pert.name, mean=float(u_p.mean()),
                            std_error=float(u_p.std(ddof=1)
                                            / np.sqrt(u_p.size)),
                            excluded=exc_p, delta_vs_policy=delta)
            if exc_p == 0 and exc_pol == 0 and u_p.size == u_pol.size:
                paired = float((u_pol - u_p).std(ddof=1) / np.sqrt(u_p.size))
            else:
                paired = row.std_error + rows[0].std_error
            row.paired_se = paired
            lower = (-delta) > 3.0 * paired
            row.verdict = "lower" if lower else "NOT-lower"
            pert_ok = pert_ok and lower
            rows.append(row)

    zero = ZeroStrategy(spec.n)
    u_z, exc_z = run(zero)
    rows.append(ReportRow(name="zero_floor", mean=float(u_z.mean()),
                          std_error=float(u_z.std(ddof=1) / np.sqrt(u_z.size))
                          if u_z.size > 1 else 0.0,
                          excluded=exc_z,
                          delta_vs_policy=float(u_z.mean() - u_pol.mean())))

    desc = (f"x[{grid.x_lo:.4g},{grid.x_hi:.4g}]x{grid.x_nodes}"
            + "".join(f" y[{lo:.4g},{hi:.4g}]x{k}" for lo, hi, k in grid.y_axes)
            + "".join(f" z[{lo:.4g},{hi:.4g}]x{k}" for lo, hi, k in grid.z_axes)
            + f" t{grid.t_steps}")
    return OptimalityReport(
        rows=rows, epsilon_budget=float(se_budget) if np.isfinite(se_budget)
        else np.nan,
        c_disc=c_disc, h=grid.spacings[0], dt=grid.dt,
        oracle_gap=gap, gap_within_budget=gap_ok,
        perturbations_all_lower=pert_ok,
        spec_hash=spec_hash or spec_fingerprint(spec), seed=mc.seed,
        grid_descriptor=desc, notes=notes)

"""Factor-diffusion market model: specification, validation, simulation.

The market has a bank account with short rate r(t) >= 0 and n risky stocks
whose excess appreciation vector and volatility matrix are functions of an
observable factor pair (eta, zeta):

    a_tilde(t) = a(eta, zeta, t) - r(eta, zeta, t) * 1,
    sigma(t)   = v(eta, zeta, t),

    d eta  = f_eta dt  + beta_eta dW + beta_eta_tilde dW~      (R^m)
    d zeta = f_zeta dt + beta_zeta_tilde dW~                   (R^M)

where W is the n-dimensional stock Brownian motion and W~ an independent
N-dimensional one.  Discounted wealth under a strategy pi follows

    d X~ = pi' (a_tilde dt + v dW)            (domain "reals", pi = amounts)
    d q  = (u'a_tilde - u'vv'u / 2) dt + u'v dW   (domain "positive",
                                                   q = ln X~, u = fractions)

Simulation runs the log coordinate whenever the wealth domain is (0, inf),
so positivity is structural.  Coefficient functions come from a closed
catalogue (constant / affine / tanh-bounded / OU drift) so Lipschitz and
growth constants can be estimated by sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from numpy.typing import NDArray

Array = NDArray[np.float64]

DOMAIN_REALS = "reals"
DOMAIN_POSITIVE = "positive"


def _as_array(x, shape, name):
    a = np.asarray(x, dtype=np.float64)
    if a.shape != tuple(shape):
        raise ValueError(f"{name}: expected shape {tuple(shape)}, got {a.shape}")
    return a


# ---------------------------------------------------------------------------
# Coefficient field catalogue
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantField:
    """Coefficient that ignores the factor state."""

    value: Array

    @property
    def shape(self):
        return np.asarray(self.value).shape

    def eval(self, y, z, t):
        y = np.asarray(y, dtype=np.float64)
        batch = y.shape[:-1]
        out = np.broadcast_to(np.asarray(self.value, dtype=np.float64),
                              batch + self.shape)
        return np.ascontiguousarray(out)


@dataclass(frozen=True)
class AffineField:
    """base + wrt_y . y + wrt_z . z, linear growth in the factors."""

    base: Array
    wrt_y: Array    # shape (*base.shape, m)
    wrt_z: Array    # shape (*base.shape, M)

    @property
    def shape(self):
        return np.asarray(self.base).shape

    def eval(self, y, z, t):
        y = np.asarray(y, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        out = np.broadcast_to(np.asarray(self.base, dtype=np.float64),
                              y.shape[:-1] + self.shape).copy()
        if y.shape[-1]:
            out += np.tensordot(y, np.asarray(self.wrt_y, dtype=np.float64),
                                axes=([-1], [-1]))
        if z.shape[-1]:
            out += np.tensordot(z, np.asarray(self.wrt_z, dtype=np.float64),
                                axes=([-1], [-1]))
        return out


@dataclass(frozen=True)
class TanhField:
    """base + amplitude * tanh(gain_y . y + gain_z . z); bounded and smooth.

    Intended for volatility-type entries that must stay bounded while
    still reacting to the factors.
    """

    base: Array
    amplitude: Array
    gain_y: Array   # (m,)
    gain_z: Array   # (M,)

    @property
    def shape(self):
        return np.asarray(self.base).shape

    def eval(self, y, z, t):
        y = np.asarray(y, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        s = np.zeros(y.shape[:-1], dtype=np.float64)
        if y.shape[-1]:
            s = s + y @ np.asarray(self.gain_y, dtype=np.float64)
        if z.shape[-1]:
            s = s + z @ np.asarray(self.gain_z, dtype=np.float64)
        bump = np.tanh(s)[(...,) + (None,) * len(self.shape)]
        return (np.asarray(self.base, dtype=np.float64)
                + np.asarray(self.amplitude, dtype=np.float64) * bump)


@dataclass(frozen=True)
class OUDriftField:
    """Mean-reverting drift rate * (mean - state) for a factor block."""

    rate: Array     # (d,)
    mean: Array     # (d,)
    target: str = "eta"   # which factor the drift reads: "eta" or "zeta"

    @property
    def shape(self):
        return np.asarray(self.rate).shape

    def eval(self, y, z, t):
        state = np.asarray(y if self.target == "eta" else z, dtype=np.float64)
        return (np.asarray(self.rate, dtype=np.float64)
                * (np.asarray(self.mean, dtype=np.float64) - state))


CoefficientField = Union[ConstantField, AffineField, TanhField, OUDriftField]


# ---------------------------------------------------------------------------
# Market specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MarketSpec:
    """Full parametric description of one market.

    n, m, M, N are the stock / eta-factor / zeta-factor / extra-noise
    dimensions.  K > 0 bounds the strategy quadratic form u'vv'u.  The
    eight coefficient fields must have shapes consistent with the
    dimensions; `domain` selects the wealth state space.
    """

    n: int
    m: int
    M: int
    N: int
    K: float
    T: float
    x0: float
    eta0: Array
    zeta0: Array
    domain: str
    rate: CoefficientField
    appreciation: CoefficientField
    volatility: CoefficientField
    eta_drift: Optional[CoefficientField] = None
    eta_stock_loadings: Optional[CoefficientField] = None
    eta_noise_loadings: Optional[CoefficientField] = None
    zeta_drift: Optional[CoefficientField] = None
    zeta_noise_loadings: Optional[CoefficientField] = None

    def __post_init__(self):
        if self.n < 1 or self.m < 0 or self.M < 0 or self.N < 0:
            raise ValueError("dimensions must satisfy n >= 1, m, M, N >= 0")
        if self.K <= 0:
            raise ValueError("constraint level K must be > 0")
        if self.T <= 0:
            raise ValueError("horizon T must be > 0")
        if self.domain not in (DOMAIN_REALS, DOMAIN_POSITIVE):
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.domain == DOMAIN_POSITIVE and self.x0 <= 0:
            raise ValueError("positive wealth domain requires x0 > 0")
        object.__setattr__(self, "eta0", _as_array(self.eta0, (self.m,), "eta0"))
        object.__setattr__(self, "zeta0", _as_array(self.zeta0, (self.M,), "zeta0"))
        self._check_field("rate", self.rate, ())
        self._check_field("appreciation", self.appreciation, (self.n,))
        self._check_field("volatility", self.volatility, (self.n, self.n))
        if self.m > 0:
            self._check_field("eta_drift", self.eta_drift, (self.m,))
            self._check_field("eta_stock_loadings", self.eta_stock_loadings,
                              (self.m, self.n))
            self._check_field("eta_noise_loadings", self.eta_noise_loadings,
                              (self.m, self.N))
        if self.M > 0:
            self._check_field("zeta_drift", self.zeta_drift, (self.M,))
            self._check_field("zeta_noise_loadings", self.zeta_noise_loadings,
                              (self.M, self.N))

    def _check_field(self, name, fld, shape):
        if fld is None:
            raise ValueError(f"{name} is required for these dimensions")
        if tuple(fld.shape) != shape:
            raise ValueError(
                f"{name}: field shape {tuple(fld.shape)} != required {shape}")

    @property
    def mu(self) -> int:
        """Number of fund directions this market needs: min(m + 1, n)."""
        return min(self.m + 1, self.n)


@dataclass(frozen=True)
class CoefficientSet:
    """All coefficient values at one state point (y, z, t)."""

    a: Array                  # (n,) appreciation rates
    v: Array                  # (n, n) volatility matrix
    r: float                  # short rate
    a_tilde: Array            # (n,) excess appreciation a - r * 1
    f_eta: Array              # (m,)
    beta_eta: Array           # (m, n)
    beta_eta_tilde: Array     # (m, N)
    f_zeta: Array             # (M,)
    beta_zeta_tilde: Array    # (M, N)

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def m(self) -> int:
        return self.f_eta.shape[0]

    @property
    def M(self) -> int:
        return self.f_zeta.shape[0]

    @property
    def N(self) -> int:
        return self.beta_eta_tilde.shape[1] if self.m else self.beta_zeta_tilde.shape[1]


def eval_coefficients(spec: MarketSpec, y, z, t: float) -> CoefficientSet:
    """Evaluate every coefficient function at one point (y, z, t)."""
    y = _as_array(y, (spec.m,), "y")
    z = _as_array(z, (spec.M,), "z")
    batch = eval_coefficient_batch(spec, y[None, :], z[None, :], t)
    return CoefficientSet(
        a=batch["a"][0], v=batch["v"][0], r=float(batch["r"][0]),
        a_tilde=batch["a_tilde"][0],
        f_eta=batch["f_eta"][0], beta_eta=batch["beta_eta"][0],
        beta_eta_tilde=batch["beta_eta_tilde"][0],
        f_zeta=batch["f_zeta"][0], beta_zeta_tilde=batch["beta_zeta_tilde"][0],
    )


def eval_coefficient_batch(spec: MarketSpec, Y, Z, t: float) -> dict:
    """Evaluate all coefficients at a batch of points.

    Y has shape (..., m) and Z shape (..., M); every returned array has the
    same leading (batch) shape.  Used by the simulator and the grid solver.
    """
    Y = np.asarray(Y, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if Y.shape[-1] != spec.m or Z.shape[-1] != spec.M:
        raise ValueError("factor batch dimensions do not match the spec")
    batch = Y.shape[:-1]
    a = spec.appreciation.eval(Y, Z, t)
    v = spec.volatility.eval(Y, Z, t)
    r = spec.rate.eval(Y, Z, t)
    out = {
        "a": a, "v": v, "r": r,
        "a_tilde": a - r[..., None],
    }
    if spec.m:
        out["f_eta"] = spec.eta_drift.eval(Y, Z, t)
        out["beta_eta"] = spec.eta_stock_loadings.eval(Y, Z, t)
        out["beta_eta_tilde"] = spec.eta_noise_loadings.eval(Y, Z, t)
    else:
        out["f_eta"] = np.zeros(batch + (0,))
        out["beta_eta"] = np.zeros(batch + (0, spec.n))
        out["beta_eta_tilde"] = np.zeros(batch + (0, spec.N))
    if spec.M:
        out["f_zeta"] = spec.zeta_drift.eval(Y, Z, t)
        out["beta_zeta_tilde"] = spec.zeta_noise_loadings.eval(Y, Z, t)
    else:
        out["f_zeta"] = np.zeros(batch + (0,))
        out["beta_zeta_tilde"] = np.zeros(batch + (0, spec.N))
    return out


# ---------------------------------------------------------------------------
# Controlled-system matrices
# ---------------------------------------------------------------------------

def build_B(coeffs: CoefficientSet) -> Array:
    """Factor diffusion matrix, block rows [beta_eta | beta_eta_tilde]
    over [0 | beta_zeta_tilde]; shape (m + M, n + N)."""
    m, M, n, N = coeffs.m, coeffs.M, coeffs.n, coeffs.beta_eta_tilde.shape[1]
    if coeffs.M:
        N = coeffs.beta_zeta_tilde.shape[1]
    B = np.zeros((m + M, n + N))
    if m:
        B[:m, :n] = coeffs.beta_eta
        B[:m, n:] = coeffs.beta_eta_tilde
    if M:
        B[m:, n:] = coeffs.beta_zeta_tilde
    return B


def build_A(coeffs: CoefficientSet, u) -> Array:
    """Diffusion matrix of the controlled state (wealth-coordinate, eta, zeta):
    first row (u'v, 0_N), remaining rows build_B(coeffs)."""
    u = _as_array(u, (coeffs.n,), "u")
    B = build_B(coeffs)
    A = np.zeros((1 + B.shape[0], B.shape[1]))
    A[0, : coeffs.n] = u @ coeffs.v
    A[1:] = B
    return A


@dataclass(frozen=True)
class EllipticityWitness:
    lambda_min: float
    u: Array
    exact: bool          # True when beta_eta v' u = 0 holds by construction


def check_ellipticity(coeffs: CoefficientSet, K: float) -> EllipticityWitness:
    """Construct a boundary control making the full system non-degenerate.

    Picks u with u'vv'u = K and beta_eta v'u = 0 (possible whenever
    m <= n - 1), for which A A' is block-diagonal(K, BB') and hence
    lambda_min = min(K, lambda_min(BB')).  When m >= n the orthogonality
    may be unattainable; the best of a sampled boundary set is returned
    with exact=False.
    """
    import scipy.linalg

    n = coeffs.n
    vT = coeffs.v.T
    if coeffs.m == 0:
        p = np.zeros(n)
        p[0] = np.sqrt(K)
        candidates = [p]
        exact = True
    else:
        ns = scipy.linalg.null_space(coeffs.beta_eta)
        if ns.size:
            candidates = [np.sqrt(K) * ns[:, 0]]
            exact = True
        else:
            rng = np.random.default_rng(0)
            raw = rng.standard_normal((64, n))
            raw /= np.linalg.norm(raw, axis=1, keepdims=True)
            candidates = list(np.sqrt(K) * raw)
            exact = False

    best_lam, best_u = -np.inf, None
    for p in candidates:
        u = np.linalg.solve(vT, p)
        A = build_A(coeffs, u)
        lam = float(np.linalg.eigvalsh(A @ A.T)[0])
        if lam > best_lam:
            best_lam, best_u = lam, u
    return EllipticityWitness(lambda_min=best_lam, u=best_u, exact=exact)


# ---------------------------------------------------------------------------
# Specification validation
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    """Sampled evidence for the standing market assumptions."""

    samples: int
    seed: int
    ellipticity_min: float        # min over samples of lambda_min(BB')
    lipschitz_max: float          # max sampled difference quotient
    growth_max: float             # max |F| / (1 + |y| + |z|)
    v_inverse_norm_max: float
    r_min: float
    C: float                      # single reported Lipschitz/growth constant
    violations: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_text(self) -> str:
        ellip = ("n/a (no factors)" if not np.isfinite(self.ellipticity_min)
                 else f"{self.ellipticity_min:.6g}")
        lines = [
            f"samples             : {self.samples} (seed {self.seed})",
            f"min lambda_min(BB') : {ellip}",
            f"max Lipschitz ratio : {self.lipschitz_max:.6g}",
            f"max growth ratio    : {self.growth_max:.6g}",
            f"reported constant C : {self.C:.6g}",
            f"max |v^-1|          : {self.v_inverse_norm_max:.6g}",
            f"min short rate      : {self.r_min:.6g}",
        ]
        for note in self.notes:
            lines.append(f"note: {note}")
        for v in self.violations:
            lines.append(f"VIOLATION: {v}")
        lines.append("result: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


_COEFF_NAMES = ("a", "v", "f_eta", "beta_eta", "beta_eta_tilde",
                "f_zeta", "beta_zeta_tilde")


def _sample_states(spec, rng, count, radius):
    Y = spec.eta0 + radius * rng.uniform(-1.0, 1.0, size=(count, spec.m))
    Z = spec.zeta0 + radius * rng.uniform(-1.0, 1.0, size=(count, spec.M))
    ts = rng.uniform(0.0, spec.T, size=count)
    return Y, Z, ts


def validate_spec(spec: MarketSpec, sample_count: int = 256, seed: int = 0,
                  radius: float = 3.0,
                  ellipticity_floor: float = 1e-10,
                  inverse_norm_cap: float = 1e8) -> ValidationReport:
    """Check the spec invariants on a random sample of state points.

    Reports min lambda_min(BB'), the largest sampled Lipschitz quotient,
    the largest growth ratio, max |v^-1| and min r; any violation is
    recorded with the offending point.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    Y, Z, ts = _sample_states(spec, rng, sample_count, radius)
    Y2, Z2, _ = _sample_states(spec, rng, sample_count, radius)

    report = ValidationReport(samples=sample_count, seed=seed,
                              ellipticity_min=np.inf, lipschitz_max=0.0,
                              growth_max=0.0, v_inverse_norm_max=0.0,
                              r_min=np.inf, C=0.0)
    if spec.m + spec.M == 0:
        report.notes.append("no factors: ellipticity check is vacuous")
        report.ellipticity_min = np.inf

    for i in range(sample_count):
        t = float(ts[i])
        c1 = eval_coefficients(spec, Y[i], Z[i], t)
        c2 = eval_coefficients(spec, Y2[i], Z2[i], t)

        report.r_min = min(report.r_min, c1.r)
        if c1.r < 0:
            report.violations.append(
                f"short rate r = {c1.r:.6g} < 0 at y={Y[i]}, z={Z[i]}, t={t:.4g}")

        try:
            v_inv = np.linalg.inv(c1.v)
            nrm = float(np.linalg.norm(v_inv, 2))
        except np.linalg.LinAlgError:
            report.violations.append(
                f"volatility not invertible at y={Y[i]}, z={Z[i]}, t={t:.4g}")
            continue
        report.v_inverse_norm_max = max(report.v_inverse_norm_max, nrm)
        if nrm > inverse_norm_cap:
            report.violations.append(
                f"|v^-1| = {nrm:.3g} exceeds cap at y={Y[i]}, z={Z[i]}, t={t:.4g}")

        if spec.m + spec.M:
            B = build_B(c1)
            lam = float(np.linalg.eigvalsh(B @ B.T)[0])
            report.ellipticity_min = min(report.ellipticity_min, lam)
            if lam < ellipticity_floor:
                report.violations.append(
                    f"lambda_min(BB') = {lam:.3g} below floor at "
                    f"y={Y[i]}, z={Z[i]}, t={t:.4g}")

        diff_state = (np.linalg.norm(Y[i] - Y2[i]) + np.linalg.norm(Z[i] - Z2[i]))
        size1 = 1.0 + np.linalg.norm(Y[i]) + np.linalg.norm(Z[i])
        for name in _COEFF_NAMES:
            F1 = np.asarray(getattr(c1, name), dtype=np.float64)
            F2 = np.asarray(getattr(c2, name), dtype=np.float64)
            if F1.size == 0:
                continue
            report.growth_max = max(report.growth_max,
                                    float(np.linalg.norm(F1) / size1))
            if diff_state > 1e-12:
                quot = float(np.linalg.norm(F1 - F2) / diff_state)
                report.lipschitz_max = max(report.lipschitz_max, quot)

    report.C = max(report.lipschitz_max, report.growth_max)
    if not np.isfinite(report.r_min):
        report.r_min = 0.0
    return report


@dataclass(frozen=True)
class DetBoundCalibration:
    """Sampled constant for the determinant growth bound.

    For controls u in the constraint set and sampled states, reports the
    largest ratio (|u|^2 + |u|) / det(AA')^(1/(n+1)) over the calibration
    sample and the smallest determinant seen (u = 0 is excluded: there the
    left side vanishes and the bound holds trivially).
    """

    c: float
    min_det: float
    max_ratio: float


def calibrate_det_bound(spec: MarketSpec, samples: int = 200, seed: int = 0,
                        radius: float = 2.0, margin: float = 1.05) -> DetBoundCalibration:
    rng = np.random.default_rng(seed)
    Y, Z, ts = _sample_states(spec, rng, samples, radius)
    max_ratio, min_det = 0.0, np.inf
    for i in range(samples):
        c = eval_coefficients(spec, Y[i], Z[i], float(ts[i]))
        p = rng.standard_normal(spec.n)
        p *= rng.uniform(0.05, 1.0) * np.sqrt(spec.K) / np.linalg.norm(p)
        u = np.linalg.solve(c.v.T, p)
        A = build_A(c, u)
        det = float(np.linalg.det(A @ A.T))
        min_det = min(min_det, det)
        if det > 0:
            unrm = float(np.linalg.norm(u))
            ratio = (unrm ** 2 + unrm) / det ** (1.0 / (spec.n + 1))
            max_ratio = max(max_ratio, ratio)
    return DetBoundCalibration(c=margin * max_ratio, min_det=min_det,
                               max_ratio=max_ratio)


# ---------------------------------------------------------------------------
# Path simulation
# ---------------------------------------------------------------------------

@dataclass
class PathBundle:
    """Simulated realization of the controlled system.

    `x` holds the wealth coordinate: discounted wealth itself when the
    domain is the reals, q = ln(discounted wealth) when the domain is
    (0, inf).  With record="terminal" only final states are kept and `pi`
    is None.  Excluded paths (non-finite states) are dropped from every
    array and counted.
    """

    domain: str
    times: Array                 # (steps + 1,)
    x: Array                     # (paths, steps + 1) or (paths,) if terminal
    eta: Array
    zeta: Array
    pi: Optional[Array]          # (paths, steps, n) control actually applied
    seed: int
    excluded_paths: int
    control_sup: Array           # per path sup |control|
    record: str

    @property
    def paths(self) -> int:
        return self.x.shape[0]

    def terminal_wealth(self) -> Array:
        xT = self.x[:, -1] if self.x.ndim == 2 else self.x
        return np.exp(xT) if self.domain == DOMAIN_POSITIVE else xT.copy()

    def to_csv(self, path_or_buf) -> None:
        """One row per (path, step); requires record='full'."""
        if self.record != "full":
            raise ValueError("CSV export needs record='full'")
        close = False
        if isinstance(path_or_buf, (str, bytes)):
            fh = open(path_or_buf, "w", newline="")
            close = True
        else:
            fh = path_or_buf
        m = self.eta.shape[2] if self.eta.ndim == 3 else 0
        M = self.zeta.shape[2] if self.zeta.ndim == 3 else 0
        n = self.pi.shape[2]
        header = ["path", "step", "time", "x"]
        header += [f"eta{k + 1}" for k in range(m)]
        header += [f"zeta{k + 1}" for k in range(M)]
        header += [f"pi{k + 1}" for k in range(n)]
        fh.write(",".join(header) + "\n")
        steps = len(self.times) - 1
        for i in range(self.paths):
            for j in range(steps + 1):
                row = [str(i), str(j), repr(float(self.times[j])),
                       repr(float(self.x[i, j]))]
                row += [repr(float(self.eta[i, j, k])) for k in range(m)]
                row += [repr(float(self.zeta[i, j, k])) for k in range(M)]
                if j < steps:
                    row += [repr(float(self.pi[i, j, k])) for k in range(n)]
                else:
                    row += [""] * n
                fh.write(",".join(row) + "\n")
        if close:
            fh.close()


def path_increments(seed: int, path_index: int, steps: int, width: int) -> Array:
    """Standard-normal increments for one path, keyed by (seed, path index).

    Serial and parallel runs agree because each path owns the stream
    derived from SeedSequence(seed, spawn_key=(path_index,)).
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(path_index,))
    return np.random.default_rng(ss).standard_normal((steps, width))


def integrate_paths(spec: MarketSpec, strategy, times, dW, dWt,
                    x0: Optional[float] = None,
                    record: str = "full") -> PathBundle:
    """Euler-Maruyama under explicitly supplied Brownian increments.

    times is the (steps + 1,) grid; dW has shape (paths, steps, n) and dWt
    (paths, steps, N), both already Brownian increments (not unit normals).
    Deterministic given its inputs; simulate_paths wraps this with seeded
    increment generation.
    """
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or len(times) < 2 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing with >= 2 entries")
    dW = np.asarray(dW, dtype=np.float64)
    dWt = np.asarray(dWt, dtype=np.float64)
    paths, steps = dW.shape[0], dW.shape[1]
    n, m, M = spec.n, spec.m, spec.M
    positive = spec.domain == DOMAIN_POSITIVE

    if x0 is None:
        x0 = spec.x0
    x = np.full(paths, np.log(x0) if positive else x0, dtype=np.float64)
    eta = np.tile(spec.eta0, (paths, 1))
    zeta = np.tile(spec.zeta0, (paths, 1))
    alive = np.ones(paths, dtype=bool)
    control_sup = np.zeros(paths)

    full = record == "full"
    if full:
        xs = np.empty((paths, steps + 1)); xs[:, 0] = x
        etas = np.empty((paths, steps + 1, m)); etas[:, 0] = eta
        zetas = np.empty((paths, steps + 1, M)); zetas[:, 0] = zeta
        pis = np.empty((paths, steps, n))

    for j in range(steps):
        t = float(times[j])
        dt = float(times[j + 1] - times[j])
        coeff = eval_coefficient_batch(spec, eta, zeta, t)
        u = np.asarray(strategy.control(x, eta, zeta, t), dtype=np.float64)
        if u.shape != (paths, n):
            raise ValueError(f"strategy returned shape {u.shape}, "
                             f"expected {(paths, n)}")
        control_sup = np.maximum(control_sup, np.linalg.norm(u, axis=1))

        a_tilde, v = coeff["a_tilde"], coeff["v"]
        uv = np.einsum("bi,bij->bj", u, v)
        drift_x = np.einsum("bi,bi->b", u, a_tilde)
        if positive:
            drift_x = drift_x - 0.5 * np.einsum("bj,bj->b", uv, uv)
        noise_x = np.einsum("bj,bj->b", uv, dW[:, j])
        x = x + drift_x * dt + noise_x

        if m:
            eta = (eta + coeff["f_eta"] * dt
                   + np.einsum("bkj,bj->bk", coeff["beta_eta"], dW[:, j])
                   + np.einsum("bkj,bj->bk", coeff["beta_eta_tilde"], dWt[:, j]))
        if M:
            zeta = (zeta + coeff["f_zeta"] * dt
                    + np.einsum("bkj,bj->bk", coeff["beta_zeta_tilde"], dWt[:, j]))

        bad = ~(np.isfinite(x) & np.isfinite(eta).all(axis=1)
                & np.isfinite(zeta).all(axis=1))
        if bad.any():
            fresh = bad & alive
            alive &= ~bad
            # freeze newly bad paths at a finite placeholder so later steps
            # keep vectorizing; they are dropped from the bundle below
            x[fresh] = 0.0
            eta[fresh] = 0.0
            zeta[fresh] = 0.0
        if full:
            xs[:, j + 1] = x
            etas[:, j + 1] = eta
            zetas[:, j + 1] = zeta
            pis[:, j] = u

    keep = alive
    excluded = int(paths - keep.sum())
    if full:
        return PathBundle(domain=spec.domain, times=times, x=xs[keep],
                          eta=etas[keep], zeta=zetas[keep], pi=pis[keep],
                          seed=-1, excluded_paths=excluded,
                          control_sup=control_sup[keep], record="full")
    return PathBundle(domain=spec.domain, times=times, x=x[keep],
                      eta=eta[keep], zeta=zeta[keep], pi=None, seed=-1,
                      excluded_paths=excluded,
                      control_sup=control_sup[keep], record="terminal")


def simulate_paths(spec: MarketSpec, strategy, steps: int, paths: int,
                   seed: int, record: str = "full",
                   block_size: int = 8192) -> PathBundle:
    """Simulate the controlled system on a uniform time grid.

    The strategy object must expose control(x, y, z, t) vectorized over
    paths; its output is interpreted as discounted amounts for domain
    "reals" and wealth fractions for domain "positive" (where the log
    coordinate keeps wealth structurally positive).  Identical inputs give
    a bit-identical bundle.
    """
    if steps < 1 or paths < 1:
        raise ValueError("steps and paths must be >= 1")
    times = np.linspace(0.0, spec.T, steps + 1)
    dt = spec.T / steps
    width = spec.n + spec.N
    sq = np.sqrt(dt)

    bundles = []
    excluded = 0
    for start in range(0, paths, block_size):
        stop = min(start + block_size, paths)
        raw = np.stack([path_increments(seed, i, steps, width)
                        for i in range(start, stop)])
        dW = sq * raw[:, :, : spec.n]
        dWt = sq * raw[:, :, spec.n:]
        bundles.append(integrate_paths(spec, strategy, times, dW, dWt,
                                       record=record))
        excluded += bundles[-1].excluded_paths

    first = bundles[0]
    cat = (lambda key: np.concatenate([getattr(b, key) for b in bundles]))
    return PathBundle(
        domain=spec.domain, times=times,
        x=cat("x"), eta=cat("eta"), zeta=cat("zeta"),
        pi=cat("pi") if record == "full" else None,
        seed=seed, excluded_paths=excluded,
        control_sup=cat("control_sup"), record=first.record)

"""Backward finite-difference solver for the portfolio Bellman equation.

State is (wealth coordinate, eta, zeta) on a tensor grid; the wealth
coordinate is discounted wealth itself on the real domain and
q = ln(discounted wealth) on the positive domain.  Each backward Euler
step evaluates

    J  <-  J + dt * (G1 + G0)

where G1 collects the factor drift/diffusion terms

    G1 = J_y . f_eta + J_z . f_zeta
         + tr[J_yy (beta_eta beta_eta' + beta_eta_tilde beta_eta_tilde')]/2
         + tr[J_zz beta_zeta_tilde beta_zeta_tilde']/2
         + tr[J_yz beta_eta_tilde beta_zeta_tilde']

and G0 is the closed-form control supremum from quadopt (with the extra
-J_x u'vv'u / 2 drift correction on the positive domain).  The optimal
control is kappa * (v')^-1 b, which by construction lies in the span of
the fund directions; the solver stores the control, the collinearity
scalar kappa and the fund coefficients at every kept time slice.

The scheme is explicit, so a stability bound on dt is computed from
coefficient maxima and enforced before stepping.  Spatial boundaries use
linear extrapolation (vanishing second normal derivative).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from . import funds as funds_mod
from .market import (DOMAIN_POSITIVE, DOMAIN_REALS, MarketSpec,
                     eval_coefficient_batch, simulate_paths)
from .quadopt import CASE_CODES, CASE_DEGENERATE, solve_ball_field

Array = NDArray[np.float64]


class StabilityError(RuntimeError):
    """Raised when the requested time step violates the explicit bound."""

    def __init__(self, required_steps, dt_max, requested_steps):
        self.required_steps = required_steps
        self.dt_max = dt_max
        self.requested_steps = requested_steps
        super().__init__(
            f"explicit scheme needs t_steps >= {required_steps} "
            f"(dt <= {dt_max:.3e}); got {requested_steps}")


# ---------------------------------------------------------------------------
# Grid and utility
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid over (wealth coordinate, y, z) x time."""

    x_lo: float
    x_hi: float
    x_nodes: int
    y_axes: tuple = ()        # ((lo, hi, nodes), ...) one per eta factor
    z_axes: tuple = ()
    t_steps: int = 100
    T: float = 1.0
    max_state_dim: int = 3    # desk-scale guard, raise deliberately to lift

    def __post_init__(self):
        if self.x_lo >= self.x_hi:
            raise ValueError("x_lo must be < x_hi")
        axes = [(self.x_lo, self.x_hi, self.x_nodes)] + list(self.y_axes) \
            + list(self.z_axes)
        for lo, hi, nodes in axes:
            if nodes < 3:
                raise ValueError("every axis needs >= 3 nodes")
            if lo >= hi:
                raise ValueError("axis bounds must be increasing")
        if len(axes) > self.max_state_dim:
            raise ValueError(
                f"state dimension {len(axes)} exceeds desk-scale guard "
                f"{self.max_state_dim}")
        if self.t_steps < 1 or self.T <= 0:
            raise ValueError("need t_steps >= 1 and T > 0")

    @property
    def m(self):
        return len(self.y_axes)

    @property
    def M(self):
        return len(self.z_axes)

    @property
    def shape(self):
        return (self.x_nodes,) + tuple(a[2] for a in self.y_axes) \
            + tuple(a[2] for a in self.z_axes)

    @property
    def x_axis(self) -> Array:
        return np.linspace(self.x_lo, self.x_hi, self.x_nodes)

    def y_axis(self, k) -> Array:
        lo, hi, nodes = self.y_axes[k]
        return np.linspace(lo, hi, nodes)

    def z_axis(self, k) -> Array:
        lo, hi, nodes = self.z_axes[k]
        return np.linspace(lo, hi, nodes)

    @property
    def axes(self):
        out = [self.x_axis]
        out += [self.y_axis(k) for k in range(self.m)]
        out += [self.z_axis(k) for k in range(self.M)]
        return out

    @property
    def spacings(self):
        return [float(a[1] - a[0]) for a in self.axes]

    @property
    def dt(self) -> float:
        return self.T / self.t_steps

    def factor_mesh(self):
        """(Y, Z) arrays of shape (*factor_shape, m) and (*factor_shape, M)."""
        axes = [self.y_axis(k) for k in range(self.m)] \
            + [self.z_axis(k) for k in range(self.M)]
        if not axes:
            return np.zeros((0,)), np.zeros((0,))
        mesh = np.meshgrid(*axes, indexing="ij")
        stacked = np.stack(mesh, axis=-1)
        return stacked[..., : self.m], stacked[..., self.m:]


@dataclass(frozen=True)
class Utility:
    """Terminal utility of discounted wealth.

    Families: "log" (ln x), "power" (x^delta / delta, delta < 1, != 0) --
    both need the positive domain -- and "capped_linear_quadratic", the
    concave nondecreasing ramp min(x - lam x^2, cap) that plateaus at the
    vertex, valid on both domains.
    """

    family: str
    domain: str
    delta: float = 0.0
    lam: float = 0.0
    cap: float = 0.0

    def __post_init__(self):
        if self.family in ("log", "power") and self.domain != DOMAIN_POSITIVE:
            raise ValueError(f"{self.family} utility needs the positive domain")
        if self.family == "power" and not (self.delta < 1 and self.delta != 0):
            raise ValueError("power utility needs delta < 1, delta != 0")
        if self.family == "capped_linear_quadratic" and self.lam <= 0:
            raise ValueError("capped utility needs lam > 0")
        if self.family not in ("log", "power", "capped_linear_quadratic"):
            raise ValueError(f"unknown utility family {self.family!r}")

    @classmethod
    def log(cls):
        return cls(family="log", domain=DOMAIN_POSITIVE)

    @classmethod
    def power(cls, delta: float):
        return cls(family="power", domain=DOMAIN_POSITIVE, delta=delta)

    @classmethod
    def capped_linear_quadratic(cls, lam: float, cap: float,
                                domain: str = DOMAIN_REALS):
        return cls(family="capped_linear_quadratic", domain=domain,
                   lam=lam, cap=cap)

    def value(self, x):
        """Utility of wealth (not of the grid coordinate)."""
        x = np.asarray(x, dtype=np.float64)
        if self.family == "log":
            return np.log(x)
        if self.family == "power":
            return np.power(x, self.delta) / self.delta
        vertex = 0.5 / self.lam
        ramp = np.where(x <= vertex, x - self.lam * x * x,
                        0.25 / self.lam)
        return np.minimum(ramp, self.cap)

    def terminal_grid_values(self, x_coord):
        """Utility on the grid coordinate (q when the domain is positive)."""
        x_coord = np.asarray(x_coord, dtype=np.float64)
        if self.domain == DOMAIN_POSITIVE:
            if self.family == "log":
                return x_coord.copy()
            if self.family == "power":
                return np.exp(self.delta * x_coord) / self.delta
            return self.value(np.exp(x_coord))
        return self.value(x_coord)

    @property
    def is_nondecreasing(self) -> bool:
        return True    # all shipped families are nondecreasing

    def membership_report(self, lo=0.05, hi=50.0, samples=2001):
        """Sampled check of the admissible-utility class conditions:
        continuity on a grid, concavity, growth max(0,U) <= c(1+|x|),
        and the domain-specific lower bounds."""
        if self.domain == DOMAIN_POSITIVE:
            xs = np.geomspace(lo, hi, samples)
        else:
            xs = np.linspace(-hi, hi, samples)
        u = self.value(xs)
        mid = self.value(0.5 * (xs[:-1] + xs[1:]))
        concave_ok = bool(np.all(mid >= 0.5 * (u[:-1] + u[1:]) - 1e-9))
        growth_c = float(np.max(np.maximum(u, 0.0) / (1.0 + np.abs(xs))))
        report = {"concave": concave_ok, "growth_constant": growth_c,
                  "nondecreasing": bool(np.all(np.diff(u) >= -1e-12))}
        if self.domain == DOMAIN_POSITIVE:
            small = xs[xs < 1.0]
            if small.size:
                ratio = np.minimum(self.value(small), 0.0) / np.log(small)
                report["log_floor_constant"] = float(np.max(ratio))
        return report


# ---------------------------------------------------------------------------
# Finite-difference stencils
# ---------------------------------------------------------------------------

def first_derivative(J, h: float, axis: int) -> Array:
    """Second-order first derivative: central interior, one-sided edges."""
    out = np.empty_like(J)
    Jm = np.moveaxis(J, axis, 0)
    om = np.moveaxis(out, axis, 0)
    om[1:-1] = (Jm[2:] - Jm[:-2]) / (2.0 * h)
    om[0] = (-3.0 * Jm[0] + 4.0 * Jm[1] - Jm[2]) / (2.0 * h)
    om[-1] = (3.0 * Jm[-1] - 4.0 * Jm[-2] + Jm[-3]) / (2.0 * h)
    return out


def second_derivative(J, h: float, axis: int) -> Array:
    """Central second derivative; one-sided second order at edges when the
    axis has >= 4 nodes, nearest-interior value otherwise."""
    out = np.empty_like(J)
    Jm = np.moveaxis(J, axis, 0)
    om = np.moveaxis(out, axis, 0)
    h2 = h * h
    om[1:-1] = (Jm[2:] - 2.0 * Jm[1:-1] + Jm[:-2]) / h2
    if Jm.shape[0] >= 4:
        om[0] = (2.0 * Jm[0] - 5.0 * Jm[1] + 4.0 * Jm[2] - Jm[3]) / h2
        om[-1] = (2.0 * Jm[-1] - 5.0 * Jm[-2] + 4.0 * Jm[-3] - Jm[-4]) / h2
    else:
        om[0] = om[1]
        om[-1] = om[-2]
    return out


@dataclass
class DerivativeFields:
    J_x: Array
    J_xx: Array
    J_y: Array      # (..., m)
    J_z: Array      # (..., M)
    J_xy: Array     # (..., m)
    J_yy: Array     # (..., m, m)
    J_zz: Array     # (..., M, M)
    J_yz: Array     # (..., m, M)


def derivative_stencils(J_slice, grid: Grid) -> DerivativeFields:
    """All first/second/cross derivatives of one value slice.

    Cross terms are nested central differences; edges fall back to the
    one-sided second-order formulas of the 1-D stencils.
    """
    J = np.asarray(J_slice, dtype=np.float64)
    if J.shape != grid.shape:
        raise ValueError(f"slice shape {J.shape} != grid shape {grid.shape}")
    hs = grid.spacings
    m, M = grid.m, grid.M
    shape = grid.shape

    firsts = [first_derivative(J, hs[a], a) for a in range(1 + m + M)]
    J_x = firsts[0]
    J_xx = second_derivative(J, hs[0], 0)
    J_y = (np.stack([firsts[1 + k] for k in range(m)], axis=-1)
           if m else np.zeros(shape + (0,)))
    J_z = (np.stack([firsts[1 + m + k] for k in range(M)], axis=-1)
           if M else np.zeros(shape + (0,)))
    J_xy = (np.stack([first_derivative(firsts[0], hs[1 + k], 1 + k)
                      for k in range(m)], axis=-1)
            if m else np.zeros(shape + (0,)))

    J_yy = np.zeros(shape + (m, m))
    for k in range(m):
        for l in range(k, m):
            if k == l:
                J_yy[..., k, k] = second_derivative(J, hs[1 + k], 1 + k)
            else:
                mixed = first_derivative(firsts[1 + k], hs[1 + l], 1 + l)
                J_yy[..., k, l] = mixed
                J_yy[..., l, k] = mixed
    J_zz = np.zeros(shape + (M, M))
    for k in range(M):
        for l in range(k, M):
            if k == l:
                J_zz[..., k, k] = second_derivative(J, hs[1 + m + k], 1 + m + k)
            else:
                mixed = first_derivative(firsts[1 + m + k], hs[1 + m + l],
                                         1 + m + l)
                J_zz[..., k, l] = mixed
                J_zz[..., l, k] = mixed
    J_yz = np.zeros(shape + (m, M))
    for k in range(m):
        for l in range(M):
            J_yz[..., k, l] = first_derivative(firsts[1 + k], hs[1 + m + l],
                                               1 + m + l)
    return DerivativeFields(J_x=J_x, J_xx=J_xx, J_y=J_y, J_z=J_z, J_xy=J_xy,
                            J_yy=J_yy, J_zz=J_zz, J_yz=J_yz)


# ---------------------------------------------------------------------------
# Value / policy containers
# ---------------------------------------------------------------------------

@dataclass
class ValueGrid:
    grid: Grid
    times: Array          # stored slice times, ascending, ends at T
    J: Array              # (n_stored, *grid.shape)

    def slice_at(self, t: float) -> int:
        """Index of the latest stored slice with time <= t."""
        idx = int(np.searchsorted(self.times, t + 1e-12, side="right") - 1)
        return max(idx, 0)


@dataclass
class PolicyGrid:
    grid: Grid
    times: Array
    u: Array              # (n_stored, *shape, n)
    Hbar: Array           # (n_stored, *shape, m + 1) fund coefficients
    kappa: Array          # (n_stored, *shape)
    case: Array           # (n_stored, *shape) uint8 codes from quadopt
    K: float

    def slice_at(self, t: float) -> int:
        idx = int(np.searchsorted(self.times, t + 1e-12, side="right") - 1)
        return max(idx, 0)


# ---------------------------------------------------------------------------
# Stability bound
# ---------------------------------------------------------------------------

def stability_report(spec: MarketSpec, grid: Grid) -> dict:
    """Coefficient maxima and the explicit-scheme time-step bound.

    dt_max = 0.9 / (sum_axes max_diffusion/h^2 + cross-term bounds
                    + drift bounds); the drift terms tighten the stated
    diffusion bound, never loosen it.
    """
    Y, Z = grid.factor_mesh()
    if grid.m + grid.M == 0:
        Y = np.zeros((1, 0))
        Z = np.zeros((1, 0))
    coeff = eval_coefficient_batch(spec, Y, Z, 0.0)
    hs = grid.spacings
    K = spec.K
    sqrtK = np.sqrt(K)

    theta = np.linalg.solve(coeff["v"], coeff["a_tilde"][..., None])[..., 0]
    theta_max = float(np.max(np.linalg.norm(theta, axis=-1), initial=0.0))

    denom = K / hs[0] ** 2
    drift_x = sqrtK * theta_max + (0.5 * K if spec.domain == DOMAIN_POSITIVE
                                   else 0.0)
    denom += drift_x / hs[0]

    if grid.m:
        be, bet = coeff["beta_eta"], coeff["beta_eta_tilde"]
        sig_y = np.einsum("...ki,...li->...kl", be, be) \
            + np.einsum("...ki,...li->...kl", bet, bet)
        row_norm = np.linalg.norm(be, axis=-1)   # (..., m)
        for k in range(grid.m):
            hy = hs[1 + k]
            denom += float(np.max(sig_y[..., k, k])) / hy ** 2
            denom += sqrtK * float(np.max(row_norm[..., k])) / (hs[0] * hy)
            denom += float(np.max(np.abs(coeff["f_eta"][..., k]))) / hy
            for l in range(k + 1, grid.m):
                denom += float(np.max(np.abs(sig_y[..., k, l]))) \
                    / (hy * hs[1 + l])
    if grid.M:
        bz = coeff["beta_zeta_tilde"]
        sig_z = np.einsum("...ki,...li->...kl", bz, bz)
        for k in range(grid.M):
            hz = hs[1 + grid.m + k]
            denom += float(np.max(sig_z[..., k, k])) / hz ** 2
            denom += float(np.max(np.abs(coeff["f_zeta"][..., k]))) / hz
            for l in range(k + 1, grid.M):
                denom += float(np.max(np.abs(sig_z[..., k, l]))) \
                    / (hz * hs[1 + grid.m + l])
        if grid.m:
            cross = np.einsum("...ki,...li->...kl", coeff["beta_eta_tilde"],
                              coeff["beta_zeta_tilde"])
            for k in range(grid.m):
                for l in range(grid.M):
                    denom += float(np.max(np.abs(cross[..., k, l]))) \
                        / (hs[1 + k] * hs[1 + grid.m + l])

    dt_max = 0.9 / denom if denom > 0 else np.inf
    required = int(np.ceil(grid.T / dt_max)) if np.isfinite(dt_max) else 1
    return {"dt_max": dt_max, "required_steps": max(required, 1),
            "denominator": denom}


def minimum_stable_steps(spec: MarketSpec, grid: Grid) -> int:
    return stability_report(spec, grid)["required_steps"]


# ---------------------------------------------------------------------------
# The solver
# ---------------------------------------------------------------------------

def _extrapolate_boundaries(J):
    for axis in range(J.ndim):
        Jm = np.moveaxis(J, axis, 0)
        Jm[0] = 2.0 * Jm[1] - Jm[2]
        Jm[-1] = 2.0 * Jm[-2] - Jm[-3]


def _tiebreak_field(theta, beta_eta):
    """Per-factor-node unit tie-break direction in ball coordinates.

    Prefers the market-price-of-risk direction v' Q a_tilde = theta, falls
    back to the first eta loading row (= v' psi_1), then to e1.
    """
    d = theta.copy()
    nrm = np.linalg.norm(d, axis=-1, keepdims=True)
    small = nrm[..., 0] < 1e-300
    if small.any() and beta_eta.shape[-2]:
        d[small] = beta_eta[small][..., 0, :]
        nrm = np.linalg.norm(d, axis=-1, keepdims=True)
        small = nrm[..., 0] < 1e-300
    if small.any():
        d[small] = 0.0
        d[small, ..., 0] = 1.0
        nrm = np.linalg.norm(d, axis=-1, keepdims=True)
    return d / nrm


def solve_bellman(spec: MarketSpec, utility: Utility, grid: Grid,
                  max_stored_slices: int = 401,
                  enforce_stability: bool = True):
    """Backward induction from J(., T) = U; returns (ValueGrid, PolicyGrid).

    Stores value and policy on at most `max_stored_slices` evenly spaced
    time slices (always including 0 and T); integration always runs at the
    grid's own t_steps.  Raises StabilityError when t_steps is too small
    for the explicit scheme and NaN errors with the slice index when the
    iteration diverges.
    """
    if utility.domain != spec.domain:
        raise ValueError("utility domain must match the market domain")
    if grid.m != spec.m or grid.M != spec.M:
        raise ValueError("grid factor axes must match the spec dimensions")
    if abs(grid.T - spec.T) > 1e-12:
        raise ValueError("grid horizon must equal the market horizon")

    rep = stability_report(spec, grid)
    if enforce_stability and grid.t_steps < rep["required_steps"]:
        raise StabilityError(rep["required_steps"], rep["dt_max"], grid.t_steps)

    n, m, M = spec.n, grid.m, grid.M
    shape = grid.shape
    dt = grid.dt
    rho = np.sqrt(spec.K)

    # factor-dependent quantities, broadcast over the leading x axis
    factor_shape = shape[1:]
    if m + M == 0:
        coeff = eval_coefficient_batch(spec, np.zeros((1, 0)),
                                       np.zeros((1, 0)), 0.0)
        coeff = {key: arr[0] for key, arr in coeff.items()}
    else:
        Y, Z = grid.factor_mesh()
        coeff = eval_coefficient_batch(spec, Y, Z, 0.0)

    v = coeff["v"]
    vT = np.swapaxes(v, -1, -2)
    inv_vT = np.linalg.inv(vT)
    theta = np.einsum("...ij,...j->...i", np.linalg.inv(v), coeff["a_tilde"])
    beta_eta = coeff["beta_eta"]
    f_eta, f_zeta = coeff["f_eta"], coeff["f_zeta"]
    sig_y = (np.einsum("...ki,...li->...kl", beta_eta, beta_eta)
             + np.einsum("...ki,...li->...kl", coeff["beta_eta_tilde"],
                         coeff["beta_eta_tilde"]))
    sig_z = np.einsum("...ki,...li->...kl", coeff["beta_zeta_tilde"],
                      coeff["beta_zeta_tilde"])
    sig_yz = np.einsum("...ki,...li->...kl", coeff["beta_eta_tilde"],
                       coeff["beta_zeta_tilde"])
    tiebreak = _tiebreak_field(theta, beta_eta)

    def expand(arr):
        """Broadcast a factor-indexed array over the x axis."""
        return np.broadcast_to(arr, (shape[0],) + factor_shape + arr.shape[len(factor_shape):])

    theta_full = expand(theta)
    beta_full = expand(beta_eta)
    inv_vT_full = expand(inv_vT)
    tiebreak_full = expand(tiebreak)

    stored = np.unique(np.round(
        np.linspace(0, grid.t_steps, min(max_stored_slices, grid.t_steps + 1))
    ).astype(int))
    slot = {int(k): i for i, k in enumerate(stored)}
    n_stored = len(stored)

    times_out = np.array([k * dt for k in stored])
    J_out = np.empty((n_stored,) + shape)
    u_out = np.empty((n_stored,) + shape + (n,))
    H_out = np.empty((n_stored,) + shape + (m + 1,))
    kappa_out = np.empty((n_stored,) + shape)
    case_out = np.empty((n_stored,) + shape, dtype=np.uint8)

    J = np.broadcast_to(utility.terminal_grid_values(grid.x_axis)
                        .reshape((shape[0],) + (1,) * (m + M)), shape).copy()

    def node_policy(derivs):
        b = derivs.J_x[..., None] * theta_full
        if m:
            b = b + np.einsum("...kn,...k->...n", beta_full, derivs.J_xy)
        if spec.domain == DOMAIN_REALS:
            alpha = -0.5 * derivs.J_xx
        else:
            alpha = 0.5 * (derivs.J_x - derivs.J_xx)
        p, kap, case, g0 = solve_ball_field(alpha, b, rho, tiebreak_full)
        u = np.einsum("...ij,...j->...i", inv_vT_full, p)
        Hbar = np.empty(shape + (m + 1,))
        if m:
            Hbar[..., :m] = kap[..., None] * derivs.J_xy
        Hbar[..., m] = kap * derivs.J_x
        deg = case == CASE_CODES[CASE_DEGENERATE]
        if deg.any():
            # tie-break keeps u proportional to Q a_tilde (or psi_1): record
            # the matching single coefficient instead of kappa * derivative
            tnorm = np.linalg.norm(theta_full, axis=-1)
            with np.errstate(divide="ignore"):
                coefs = np.where(tnorm > 0, rho / np.where(tnorm > 0, tnorm, 1.0),
                                 np.nan)
            Hbar[deg] = 0.0
            Hbar[..., m][deg] = coefs[deg]
        return u, Hbar, kap, case, g0

    def store(k, J_slice, pol):
        i = slot[int(k)]
        J_out[i] = J_slice
        u_out[i], H_out[i], kappa_out[i], case_out[i] = pol[0], pol[1], pol[2], pol[3]

    for k in range(grid.t_steps, 0, -1):
        derivs = derivative_stencils(J, grid)
        u, Hbar, kap, case, g0 = node_policy(derivs)
        if int(k) in slot:
            store(k, J, (u, Hbar, kap, case))

        g1 = np.zeros(shape)
        if m:
            g1 += np.einsum("...k,...k->...", derivs.J_y, expand(f_eta))
            g1 += 0.5 * np.einsum("...kl,...kl->...", derivs.J_yy,
                                  expand(sig_y))
        if M:
            g1 += np.einsum("...k,...k->...", derivs.J_z, expand(f_zeta))
            g1 += 0.5 * np.einsum("...kl,...kl->...", derivs.J_zz,
                                  expand(sig_z))
        if m and M:
            g1 += np.einsum("...kl,...kl->...", derivs.J_yz, expand(sig_yz))

        J = J + dt * (g1 + g0)
        _extrapolate_boundaries(J)
        if not np.all(np.isfinite(J)):
            raise FloatingPointError(
                f"non-finite value slice while stepping to index {k - 1}")

    derivs = derivative_stencils(J, grid)
    store(0, J, node_policy(derivs)[:4])

    value = ValueGrid(grid=grid, times=times_out, J=J_out)
    policy = PolicyGrid(grid=grid, times=times_out, u=u_out, Hbar=H_out,
                        kappa=kappa_out, case=case_out, K=spec.K)
    return value, policy


def backward_step(spec: MarketSpec, utility_domain: str, grid: Grid,
                  J_slice, dt: float):
    """One explicit backward step applied to an arbitrary slice.

    Exposed for dynamic-programming consistency checks; mirrors exactly
    what solve_bellman does between two neighbouring time slices.
    """
    derivs = derivative_stencils(J_slice, grid)

    Y, Z = grid.factor_mesh()
    if grid.m + grid.M == 0:
        coeff = eval_coefficient_batch(spec, np.zeros((1, 0)), np.zeros((1, 0)), 0.0)
        coeff = {k: v[0] for k, v in coeff.items()}
    else:
        coeff = eval_coefficient_batch(spec, Y, Z, 0.0)
    shape = grid.shape
    factor_shape = shape[1:]

    def expand(arr):
        return np.broadcast_to(arr, (shape[0],) + factor_shape
                               + arr.shape[len(factor_shape):])

    v = coeff["v"]
    theta = np.einsum("...ij,...j->...i", np.linalg.inv(v), coeff["a_tilde"])
    b = derivs.J_x[..., None] * expand(theta)
    if grid.m:
        b = b + np.einsum("...kn,...k->...n", expand(coeff["beta_eta"]),
                          derivs.J_xy)
    if utility_domain == DOMAIN_REALS:
        alpha = -0.5 * derivs.J_xx
    else:
        alpha = 0.5 * (derivs.J_x - derivs.J_xx)
    tiebreak = expand(_tiebreak_field(theta, coeff["beta_eta"]))
    _, _, _, g0 = solve_ball_field(alpha, b, np.sqrt(spec.K), tiebreak)

    g1 = np.zeros(shape)
    if grid.m:
        sig_y = (np.einsum("...ki,...li->...kl", coeff["beta_eta"],
                           coeff["beta_eta"])
                 + np.einsum("...ki,...li->...kl", coeff["beta_eta_tilde"],
                             coeff["beta_eta_tilde"]))
        g1 += np.einsum("...k,...k->...", derivs.J_y, expand(coeff["f_eta"]))
        g1 += 0.5 * np.einsum("...kl,...kl->...", derivs.J_yy, expand(sig_y))
    if grid.M:
        sig_z = np.einsum("...ki,...li->...kl", coeff["beta_zeta_tilde"],
                          coeff["beta_zeta_tilde"])
        g1 += np.einsum("...k,...k->...", derivs.J_z, expand(coeff["f_zeta"]))
        g1 += 0.5 * np.einsum("...kl,...kl->...", derivs.J_zz, expand(sig_z))
    if grid.m and grid.M:
        sig_yz = np.einsum("...ki,...li->...kl", coeff["beta_eta_tilde"],
                           coeff["beta_zeta_tilde"])
        g1 += np.einsum("...kl,...kl->...", derivs.J_yz, expand(sig_yz))

    out = np.asarray(J_slice) + dt * (g1 + g0)
    _extrapolate_boundaries(out)
    return out


# ---------------------------------------------------------------------------
# Policy analysis
# ---------------------------------------------------------------------------

def concavity_violation(value: ValueGrid, domain: str) -> float:
    """Largest wealth-concavity violation over interior nodes and slices.

    On the real domain this is max J_xx; on the positive domain concavity
    in wealth x = e^q reads J_qq - J_q <= 0, so that difference is
    reported.  Nonpositive result (up to tolerance) means concave.
    """
    worst = -np.inf
    h = value.grid.spacings[0]
    for i in range(value.J.shape[0]):
        J = value.J[i]
        J_xx = second_derivative(J, h, 0)
        if domain == DOMAIN_POSITIVE:
            J_x = first_derivative(J, h, 0)
            viol = J_xx - J_x
        else:
            viol = J_xx
        interior = viol[1:-1]
        worst = max(worst, float(interior.max()))
    return worst


def monotonicity_violation(value: ValueGrid) -> float:
    """Largest negative forward difference of J along the wealth axis."""
    diffs = np.diff(value.J, axis=1)
    return float(-diffs.min())


@dataclass
class FundPolicyReport:
    max_span_residual: float
    max_H_top_error: float      # |Hbar_{m+1} - kappa J_x|
    max_H_factor_error: float   # |Hbar_k - kappa J_xy_k|
    degenerate_nodes: int
    checked_nodes: int


def extract_fund_policy(policy: PolicyGrid, fund_set, value: ValueGrid,
                        slices: Optional[Sequence[int]] = None) -> FundPolicyReport:
    """Verify the stored policy against the fund-direction representation.

    Recomputes value derivatives from the stored slices, checks the fund
    coefficients Hbar against kappa * (J_x, J_xy), and measures the
    relative residual of every control against the fund span.
    """
    grid = policy.grid
    spec = fund_set.spec
    if slices is None:
        count = value.J.shape[0]
        slices = sorted({0, count - 1, count // 2})
    Y, Z = grid.factor_mesh()
    factor_shape = grid.shape[1:]
    flat_factors = int(np.prod(factor_shape)) if factor_shape else 1
    Yf = Y.reshape(flat_factors, spec.m) if spec.m + spec.M else np.zeros((1, 0))
    Zf = Z.reshape(flat_factors, spec.M) if spec.m + spec.M else np.zeros((1, 0))

    max_resid = 0.0
    max_top = 0.0
    max_fac = 0.0
    degenerate = 0
    checked = 0
    deg_code = CASE_CODES[CASE_DEGENERATE]

    for si in slices:
        t = float(policy.times[si])
        derivs = derivative_stencils(value.J[si], grid)
        u = policy.u[si].reshape(grid.shape[0], flat_factors, spec.n)
        kap = policy.kappa[si].reshape(grid.shape[0], flat_factors)
        case = policy.case[si].reshape(grid.shape[0], flat_factors)
        Hbar = policy.Hbar[si].reshape(grid.shape[0], flat_factors, spec.m + 1)
        J_x = derivs.J_x.reshape(grid.shape[0], flat_factors)
        J_xy = derivs.J_xy.reshape(grid.shape[0], flat_factors, spec.m)

        for f in range(flat_factors):
            psi = fund_set.directions_at(Yf[min(f, Yf.shape[0] - 1)],
                                         Zf[min(f, Zf.shape[0] - 1)], t)
            nu, *_ = np.linalg.lstsq(psi.T, u[:, f].T, rcond=None)
            resid = np.linalg.norm(u[:, f].T - psi.T @ nu, axis=0)
            scale = np.maximum(np.linalg.norm(u[:, f], axis=1), 1e-30)
            max_resid = max(max_resid, float(np.max(resid / scale)))

            nd = case[:, f] != deg_code
            degenerate += int((~nd).sum())
            checked += u.shape[0]
            if nd.any():
                max_top = max(max_top, float(np.max(np.abs(
                    Hbar[nd, f, spec.m] - kap[nd, f] * J_x[nd, f]))))
                if spec.m:
                    max_fac = max(max_fac, float(np.max(np.abs(
                        Hbar[nd, f, : spec.m]
                        - kap[nd, f][:, None] * J_xy[nd, f]))))
    return FundPolicyReport(max_span_residual=max_resid,
                            max_H_top_error=max_top,
                            max_H_factor_error=max_fac,
                            degenerate_nodes=degenerate,
                            checked_nodes=checked)


@dataclass
class ArgmaxCheckReport:
    """Closed-form-free witness that Bellman maximizers lie in the span."""

    sampled_nodes: int
    informative_nodes: int
    passing_nodes: int
    max_residual_informative: float
    residual_tolerance: float
    failures: list = field(default_factory=list)

    @property
    def passing_fraction(self) -> float:
        if self.informative_nodes == 0:
            return 1.0
        return self.passing_nodes / self.informative_nodes


def unrestricted_argmax_check(value: ValueGrid, spec: MarketSpec, grid: Grid,
                              samples: int = 200, seed: int = 0,
                              residual_tol: float = 1e-4,
                              n_starts: int = 512) -> ArgmaxCheckReport:
    """Maximize the control integrand numerically and test the fund span.

    At randomly sampled grid nodes the objective

        J_x u'a_tilde + c u'vv'u / 2 + u' v beta_eta' J_xy,
        c = J_xx  (real domain)  or  J_xx - J_x  (positive domain)

    is maximized over u'vv'u <= K by dense sampling of the constraint set
    followed by SLSQP refinement -- no use of the closed form.  Each
    maximizer's relative residual against the fund directions is reported.
    """
    from scipy.optimize import minimize

    from .market import eval_coefficients

    if spec.n > 4:
        raise ValueError("sampled search supports n <= 4")
    rng = np.random.default_rng(seed)
    fund_set = funds_mod.FundSet(spec)
    n = spec.n
    K = spec.K

    n_slices = value.J.shape[0]
    slice_ids = sorted(set(rng.integers(0, n_slices, size=min(8, n_slices)).tolist()))
    derivs_cache = {si: derivative_stencils(value.J[si], grid)
                    for si in slice_ids}

    report = ArgmaxCheckReport(sampled_nodes=0, informative_nodes=0,
                               passing_nodes=0, max_residual_informative=0.0,
                               residual_tolerance=residual_tol)

    for _ in range(samples):
        si = slice_ids[rng.integers(0, len(slice_ids))]
        idx = tuple(rng.integers(1, s - 1) for s in grid.shape)
        derivs = derivs_cache[si]
        t = float(value.times[si])
        y = np.array([grid.y_axis(k)[idx[1 + k]] for k in range(grid.m)])
        z = np.array([grid.z_axis(k)[idx[1 + grid.m + k]]
                      for k in range(grid.M)])
        coeffs = eval_coefficients(spec, y, z, t)

        J_x = float(derivs.J_x[idx])
        J_xx = float(derivs.J_xx[idx])
        J_xy = derivs.J_xy[idx]
        c = J_xx if spec.domain == DOMAIN_REALS else J_xx - J_x
        Sig = coeffs.v @ coeffs.v.T
        lin = J_x * coeffs.a_tilde
        if spec.m:
            lin = lin + coeffs.v @ (coeffs.beta_eta.T @ J_xy)

        def phi(u):
            return float(u @ lin + 0.5 * c * (u @ Sig @ u))

        report.sampled_nodes += 1

        # dense sampling of the constraint ellipsoid via ball coordinates
        raw = rng.standard_normal((n_starts, n))
        radii = rng.uniform(0.0, 1.0, n_starts) ** (1.0 / n)
        p = raw / np.linalg.norm(raw, axis=1, keepdims=True) \
            * (radii * np.sqrt(K))[:, None]
        U = np.linalg.solve(coeffs.v.T, p.T).T
        vals = U @ lin + 0.5 * c * np.einsum("bi,ij,bj->b", U, Sig, U)
        spread = float(vals.max() - vals.min())
        if spread <= 1e-9 * (1.0 + float(np.abs(vals).max())):
            continue    # flat objective: uninformative node
        report.informative_nodes += 1

        u0 = U[int(np.argmax(vals))]
        res = minimize(
            lambda u: -(u @ lin + 0.5 * c * (u @ Sig @ u)),
            u0, jac=lambda u: -(lin + c * (Sig @ u)),
            method="SLSQP",
            constraints=[{"type": "ineq",
                          "fun": lambda u: K - u @ Sig @ u,
                          "jac": lambda u: -2.0 * Sig @ u}],
            options={"ftol": 1e-14, "maxiter": 300})
        u_star = res.x if phi(res.x) >= phi(u0) else u0

        psi = fund_set.directions_at(y, z, t)
        dec = funds_mod.decompose(u_star, psi)
        resid = dec.relative_residual
        report.max_residual_informative = max(report.max_residual_informative,
                                              resid)
        if resid <= residual_tol:
            report.passing_nodes += 1
        else:
            report.failures.append({"slice": si, "node": idx,
                                    "residual": resid,
                                    "u": u_star.tolist()})
    return report


# ---------------------------------------------------------------------------
# Convergence study
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceRow:
    x_nodes: int
    h: float
    dt: float
    value_error: float
    policy_error: float


@dataclass
class ConvergenceStudy:
    rows: list
    fitted_order: float           # slope of log(value_error) vs log(h)
    exact: bool                   # all errors at rounding level
    C_disc: float                 # max error / (h + dt)

    def to_text(self) -> str:
        lines = ["x_nodes        h        dt    value_err   policy_err"]
        for r in self.rows:
            lines.append(f"{r.x_nodes:7d} {r.h:9.3e} {r.dt:9.3e} "
                         f"{r.value_error:11.4e} {r.policy_error:11.4e}")
        tag = "exact-at-rounding" if self.exact else f"{self.fitted_order:.3f}"
        lines.append(f"fitted spatial order: {tag}; C_disc = {self.C_disc:.4g}")
        return "\n".join(lines)


def _reporting_region(grid: Grid, fraction: float = 0.5):
    """Central slice covering `fraction` of each axis by node count."""
    sl = []
    for size in grid.shape:
        lo = max(1, int(round(size * (1.0 - fraction) / 2.0)))
        sl.append(slice(lo, size - lo))
    return tuple(sl)


def convergence_study(spec: MarketSpec, utility: Utility,
                      grids: Sequence[Grid],
                      oracle_value: Callable[[Array, float], Array],
                      oracle_control: Optional[Array] = None,
                      exact_floor: float = 1e-10,
                      region_fraction: float = 0.5) -> ConvergenceStudy:
    """Errors of the solved value (and optionally control) against a closed
    form, across grid refinements, with a fitted spatial order.

    oracle_value maps (wealth-coordinate nodes, t) to exact values; errors
    are max-norm at t = 0 over the central region covering
    `region_fraction` of each axis (keep the region small relative to the
    box so the fit measures discretization, not domain truncation).  When
    every error sits at rounding level, the fit is skipped and the study
    is marked exact.
    """
    rows = []
    for g in grids:
        value, policy = solve_bellman(spec, utility, g)
        region = _reporting_region(g, region_fraction)
        exact0 = oracle_value(g.axes[0], 0.0)
        exact_full = np.broadcast_to(
            exact0.reshape((g.shape[0],) + (1,) * (len(g.shape) - 1)), g.shape)
        err = float(np.max(np.abs((value.J[0] - exact_full)[region])))
        perr = np.nan
        if oracle_control is not None:
            diff = policy.u[0] - oracle_control
            perr = float(np.max(np.linalg.norm(diff, axis=-1)[region]))
        rows.append(ConvergenceRow(x_nodes=g.x_nodes, h=g.spacings[0],
                                   dt=g.dt, value_error=err,
                                   policy_error=perr))

    errs = np.array([r.value_error for r in rows])
    hs = np.array([r.h for r in rows])
    exact = bool(np.all(errs < exact_floor))
    if exact or len(rows) < 2:
        order = np.inf if exact else np.nan
    else:
        mask = errs > 0
        order = float(np.polyfit(np.log(hs[mask]), np.log(errs[mask]), 1)[0])
    c_disc = float(max((r.value_error / (r.h + r.dt)) for r in rows))
    return ConvergenceStudy(rows=rows, fitted_order=order, exact=exact,
                            C_disc=c_disc)


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

_MAGIC = b"FSGRID01"


def export_csv(value: ValueGrid, policy: PolicyGrid, path_or_buf,
               slices: Optional[Sequence[int]] = None) -> None:
    """Node coordinates plus value/policy fields, one row per node."""
    grid = value.grid
    close = False
    if isinstance(path_or_buf, (str, bytes)):
        fh = open(path_or_buf, "w", newline="")
        close = True
    else:
        fh = path_or_buf
    if slices is None:
        slices = range(value.J.shape[0])
    n = policy.u.shape[-1]
    mH = policy.Hbar.shape[-1]
    header = (["t", "x"] + [f"y{k+1}" for k in range(grid.m)]
              + [f"z{k+1}" for k in range(grid.M)] + ["J"]
              + [f"u{i+1}" for i in range(n)]
              + [f"H{i+1}" for i in range(mH)] + ["kappa", "case"])
    fh.write(",".join(header) + "\n")
    axes = grid.axes
    for si in slices:
        t = float(value.times[si])
        for idx in np.ndindex(grid.shape):
            coords = [axes[a][idx[a]] for a in range(len(idx))]
            row = [repr(t)] + [repr(float(cc)) for cc in coords]
            row.append(repr(float(value.J[si][idx])))
            row += [repr(float(w)) for w in policy.u[si][idx]]
            row += [repr(float(w)) for w in policy.Hbar[si][idx]]
            row.append(repr(float(policy.kappa[si][idx])))
            row.append(str(int(policy.case[si][idx])))
            fh.write(",".join(row) + "\n")
    if close:
        fh.close()


def export_binary(value: ValueGrid, policy: PolicyGrid, path: str) -> None:
    """Compact dump: header with axis descriptors, then row-major tensors.

    Layout (little endian): magic "FSGRID01"; uint32 axis count A, n, m, M,
    stored-slice count S; float64 K; A x (float64 lo, float64 hi, uint32
    nodes); float64 times[S]; float64 J[S * nodes]; float64 u[S * nodes * n];
    float64 Hbar[S * nodes * (m+1)]; float64 kappa[S * nodes];
    uint8 case[S * nodes].  Tensors are C-order over (slice, x, y..., z...).
    """
    grid = value.grid
    axes_desc = [(grid.x_lo, grid.x_hi, grid.x_nodes)] \
        + list(grid.y_axes) + list(grid.z_axes)
    n = policy.u.shape[-1]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<5I", len(axes_desc), n, grid.m, grid.M,
                             value.J.shape[0]))
        fh.write(struct.pack("<d", policy.K))
        for lo, hi, nodes in axes_desc:
            fh.write(struct.pack("<ddI", lo, hi, nodes))
        fh.write(np.asarray(value.times, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(value.J, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(policy.u, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(policy.Hbar, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(policy.kappa, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(policy.case, dtype=np.uint8).tobytes())


def read_binary(path: str):
    """Inverse of export_binary; returns (ValueGrid, PolicyGrid)."""
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError("not a fundspan grid dump")
        A, n, m, M, S = struct.unpack("<5I", fh.read(20))
        K = struct.unpack("<d", fh.read(8))[0]
        axes = [struct.unpack("<ddI", fh.read(20)) for _ in range(A)]
        shape = tuple(a[2] for a in axes)
        count = int(np.prod(shape))
        times = np.frombuffer(fh.read(8 * S), dtype="<f8").copy()
        J = np.frombuffer(fh.read(8 * S * count), dtype="<f8") \
            .reshape((S,) + shape).copy()
        u = np.frombuffer(fh.read(8 * S * count * n), dtype="<f8") \
            .reshape((S,) + shape + (n,)).copy()
        Hbar = np.frombuffer(fh.read(8 * S * count * (m + 1)), dtype="<f8") \
            .reshape((S,) + shape + (m + 1,)).copy()
        kappa = np.frombuffer(fh.read(8 * S * count), dtype="<f8") \
            .reshape((S,) + shape).copy()
        case = np.frombuffer(fh.read(S * count), dtype=np.uint8) \
            .reshape((S,) + shape).copy()
    T = float(times[-1])
    grid = Grid(x_lo=axes[0][0], x_hi=axes[0][1], x_nodes=axes[0][2],
                y_axes=tuple(axes[1:1 + m]), z_axes=tuple(axes[1 + m:]),
                t_steps=max(S - 1, 1), T=T)
    return (ValueGrid(grid=grid, times=times, J=J),
            PolicyGrid(grid=grid, times=times, u=u, Hbar=Hbar, kappa=kappa,
                       case=case, K=K))


# ---------------------------------------------------------------------------
# Grid auto-sizing
# ---------------------------------------------------------------------------

def factor_bounds(spec: MarketSpec, factor_sds: float = 4.0, seed: int = 0):
    """Axis bounds covering >= factor_sds standard deviations of a quick
    factor-only simulation (the factors do not depend on the control)."""
    y_bounds, z_bounds = [], []
    if spec.m + spec.M:
        class _Zero:
            def control(self, x, y, z, t):
                return np.zeros((x.shape[0], spec.n))
        bundle = simulate_paths(spec, _Zero(), steps=64, paths=512, seed=seed,
                                record="full")
        for k in range(spec.m):
            y_bounds.append(_axis_bounds(bundle.eta[:, :, k],
                                         spec.eta0[k], factor_sds))
        for k in range(spec.M):
            z_bounds.append(_axis_bounds(bundle.zeta[:, :, k],
                                         spec.zeta0[k], factor_sds))
    return y_bounds, z_bounds


def auto_grid(spec: MarketSpec, x_nodes: int = 101,
              factor_nodes: int = 31, t_steps: Optional[int] = None,
              wealth_span: float = 33.0, factor_sds: float = 4.0,
              seed: int = 0) -> Grid:
    """Build a grid box from the spec.

    Wealth axis covers [x0/wealth_span, wealth_span * x0] (log coordinates
    on the positive domain); the default span is generous so that the
    far-field boundary error cannot contaminate the reporting region.
    Factor axes cover +- factor_sds standard deviations of a quick
    factor-only simulation.  t_steps defaults to the explicit-scheme
    stability minimum.
    """
    if spec.domain == DOMAIN_POSITIVE:
        x_lo, x_hi = np.log(spec.x0 / wealth_span), np.log(spec.x0 * wealth_span)
    else:
        x_lo, x_hi = spec.x0 / wealth_span, spec.x0 * wealth_span
        if x_lo >= x_hi:
            x_lo, x_hi = sorted((x_lo, x_hi))

    y_bounds, z_bounds = factor_bounds(spec, factor_sds, seed)
    grid = Grid(x_lo=float(x_lo), x_hi=float(x_hi), x_nodes=x_nodes,
                y_axes=tuple((lo, hi, factor_nodes) for lo, hi in y_bounds),
                z_axes=tuple((lo, hi, factor_nodes) for lo, hi in z_bounds),
                t_steps=1, T=spec.T)
    if t_steps is None:
        t_steps = minimum_stable_steps(spec, grid)
    return Grid(x_lo=grid.x_lo, x_hi=grid.x_hi, x_nodes=x_nodes,
                y_axes=grid.y_axes, z_axes=grid.z_axes,
                t_steps=int(t_steps), T=spec.T)


def _axis_bounds(samples, center, sds):
    sd = float(np.max(samples.std(axis=0)))
    sd = max(sd, 1e-6)
    lo = min(float(samples.min()), center) - 0.5 * sd
    hi = max(float(samples.max()), center) + 0.5 * sd
    lo = min(lo, center - sds * sd)
    hi = max(hi, center + sds * sd)
    return lo, hi

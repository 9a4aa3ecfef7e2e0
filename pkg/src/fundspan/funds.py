"""Mutual-fund directions and span decomposition.

A market with m observable stock-driven factors and n stocks needs only
mu = min(m + 1, n) fund directions to span every pointwise Bellman
maximizer:

    psi_k(y, z, t)   = (v')^-1 (row k of beta_eta),  k = 1..m
    psi_{m+1}(y,z,t) = Q a_tilde,   Q = (v v')^-1

When m + 1 >= n the first n standard basis vectors span everything and
are used instead.  The identity Q v = (v')^-1 turns the raw maximizer
kappa (v')^-1 b into a combination of these directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .market import CoefficientSet, MarketSpec, eval_coefficients

Array = NDArray[np.float64]

BASIS_FACTOR = "factor_funds"
BASIS_STANDARD = "standard_basis"

_CONDITION_CAP = 1e12
_EPS_FLOOR = 1e-30


def mu_of(m: int, n: int) -> int:
    """Fund count for a market with m stock-driven factors and n stocks."""
    if n < 1 or m < 0:
        raise ValueError("need n >= 1 and m >= 0")
    return min(m + 1, n)


def compute_Q(v) -> Array:
    """(v v')^-1, symmetric positive definite for invertible v."""
    v = np.asarray(v, dtype=np.float64)
    cond = np.linalg.cond(v)
    if not np.isfinite(cond) or cond > _CONDITION_CAP:
        raise ValueError(
            f"volatility matrix too ill-conditioned: cond(v) = {cond:.3g}")
    vvT = v @ v.T
    Q = np.linalg.inv(vvT)
    return 0.5 * (Q + Q.T)


def q_columns(v) -> Array:
    """Columns of (v')^-1, stacked as a matrix; satisfies Q v_i = q_i."""
    v = np.asarray(v, dtype=np.float64)
    cond = np.linalg.cond(v)
    if not np.isfinite(cond) or cond > _CONDITION_CAP:
        raise ValueError(
            f"volatility matrix too ill-conditioned: cond(v) = {cond:.3g}")
    return np.linalg.inv(v.T)


def fund_directions(coeffs: CoefficientSet):
    """Evaluate the fund directions at one state point.

    Returns (directions, basis_tag) where directions is a (mu, n) array.
    Rows 1..m are (v')^-1 beta_eta rows, the last row is Q a_tilde; when
    m + 1 >= n the standard basis is returned instead.
    """
    n, m = coeffs.n, coeffs.m
    mu = mu_of(m, n)
    if m + 1 >= n:
        return np.eye(n)[:mu], BASIS_STANDARD
    qc = q_columns(coeffs.v)
    out = np.empty((mu, n))
    out[:m] = coeffs.beta_eta @ qc.T      # row k = sum_i q_i beta_eta[k, i]
    out[m] = compute_Q(coeffs.v) @ coeffs.a_tilde
    return out, BASIS_FACTOR


@dataclass(frozen=True)
class FundSet:
    """Fund directions of a market, evaluable anywhere in factor space."""

    spec: MarketSpec

    @property
    def mu(self) -> int:
        return mu_of(self.spec.m, self.spec.n)

    @property
    def basis_tag(self) -> str:
        return BASIS_STANDARD if self.spec.m + 1 >= self.spec.n else BASIS_FACTOR

    def directions_at(self, y, z, t: float) -> Array:
        coeffs = eval_coefficients(self.spec, y, z, t)
        directions, _ = fund_directions(coeffs)
        return directions

    def export_csv(self, path_or_buf, y_values, z_values, t_values) -> None:
        """Tabulate the directions over a product grid of factor points."""
        close = False
        if isinstance(path_or_buf, (str, bytes)):
            fh = open(path_or_buf, "w", newline="")
            close = True
        else:
            fh = path_or_buf
        m, M, n = self.spec.m, self.spec.M, self.spec.n
        header = (["t"] + [f"y{k+1}" for k in range(m)]
                  + [f"z{k+1}" for k in range(M)]
                  + [f"psi{k+1}_{i+1}" for k in range(self.mu) for i in range(n)])
        fh.write(",".join(header) + "\n")
        for t in t_values:
            for y in y_values:
                for z in z_values:
                    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
                    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
                    d = self.directions_at(y, z, float(t))
                    row = [repr(float(t))]
                    row += [repr(float(v)) for v in y]
                    row += [repr(float(v)) for v in z]
                    row += [repr(float(v)) for v in d.ravel()]
                    fh.write(",".join(row) + "\n")
        if close:
            fh.close()


@dataclass(frozen=True)
class SpanDecomposition:
    coefficients: Array
    residual_norm: float
    relative_residual: float


def decompose(u, funds) -> SpanDecomposition:
    """Least-squares coefficients of u against a list of fund directions.

    Rank-deficient fund sets get the minimum-norm solution; the relative
    residual is residual / max(|u|, tiny floor) so u = 0 reports 0.
    """
    u = np.asarray(u, dtype=np.float64)
    F = np.asarray(funds, dtype=np.float64)   # (mu, n) rows are directions
    if F.ndim != 2 or F.shape[0] < 1:
        raise ValueError("need at least one fund direction")
    nu, *_ = np.linalg.lstsq(F.T, u, rcond=None)
    resid = float(np.linalg.norm(u - F.T @ nu))
    rel = resid / max(float(np.linalg.norm(u)), _EPS_FLOOR)
    return SpanDecomposition(coefficients=nu, residual_norm=resid,
                             relative_residual=rel)


def span_residuals(U, F):
    """Relative span residuals for a batch of vectors.

    U: (..., n) vectors, F: (mu, n) fund rows or (..., mu, n) per-point
    funds.  Returns (..., ) relative residuals.
    """
    U = np.asarray(U, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 2:
        F = np.broadcast_to(F, U.shape[:-1] + F.shape)
    flatU = U.reshape(-1, U.shape[-1])
    flatF = F.reshape(-1, F.shape[-2], F.shape[-1])
    out = np.empty(flatU.shape[0])
    for i in range(flatU.shape[0]):
        nu, *_ = np.linalg.lstsq(flatF[i].T, flatU[i], rcond=None)
        resid = np.linalg.norm(flatU[i] - flatF[i].T @ nu)
        out[i] = resid / max(np.linalg.norm(flatU[i]), _EPS_FLOOR)
    return out.reshape(U.shape[:-1])

"""Closed-form maximization of -alpha |p|^2 + p'b over the ball |p| <= rho.

This quadratic ball problem is the control subproblem of the portfolio
Bellman operator after the change of variables p = v'u: the curvature
alpha comes from the wealth second derivative of the value function, the
linear term b from its first derivatives, and rho = sqrt(K) encodes the
constraint u'vv'u <= K.

Case analysis (rho > 0):
  * alpha > 0 and |b| <= 2 alpha rho : interior optimum p = b / (2 alpha)
  * alpha > 0 and |b| >  2 alpha rho : boundary optimum p = rho b / |b|
  * alpha <= 0 and b != 0            : boundary optimum p = rho b / |b|
  * alpha == 0 and b == 0            : objective identically 0, p = 0
  * alpha <  0 and b == 0            : every boundary point ties; the
                                       caller-supplied direction breaks it

In every non-degenerate case the optimum is collinear with b, p = k b,
which is what makes the portfolio argmax a combination of fixed fund
directions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .market import DOMAIN_POSITIVE, DOMAIN_REALS, CoefficientSet

Array = NDArray[np.float64]

CASE_INTERIOR = "interior"
CASE_BOUNDARY = "boundary_along_b"
CASE_DEGENERATE = "degenerate_boundary"
CASE_ZERO = "zero"

# integer codes used in vectorized policy fields
CASE_CODES = {CASE_INTERIOR: 0, CASE_BOUNDARY: 1, CASE_ZERO: 2,
              CASE_DEGENERATE: 3}
CASE_NAMES = {v: k for k, v in CASE_CODES.items()}


@dataclass(frozen=True)
class BallProblem:
    """Maximize -alpha |p|^2 + p'b subject to |p| <= rho."""

    alpha: float
    b: Array
    rho: float

    def __post_init__(self):
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.float64))
        if self.rho <= 0:
            raise ValueError("rho must be > 0")
        if not np.all(np.isfinite(self.b)) or not np.isfinite(self.alpha):
            raise ValueError("alpha and b must be finite")

    def objective(self, p) -> float:
        p = np.asarray(p, dtype=np.float64)
        return float(-self.alpha * (p @ p) + p @ self.b)


@dataclass(frozen=True)
class BallSolution:
    p: Array
    k: float                  # p = k b whenever the case is non-degenerate
    case_tag: str
    objective_value: float


def solve_ball(problem: BallProblem, tiebreak: Optional[Array] = None) -> BallSolution:
    """Global maximizer of the ball problem.

    `tiebreak` is the unit direction used when alpha < 0 and b = 0 (every
    boundary point is optimal); default is the first basis vector.
    """
    alpha, b, rho = problem.alpha, problem.b, problem.rho
    bnorm = float(np.linalg.norm(b))

    if alpha > 0 and bnorm <= 2.0 * alpha * rho:
        k = 1.0 / (2.0 * alpha)
        if np.isfinite(k):
            p = k * b
        else:
            # subnormal alpha: the reciprocal overflows but b/(2 alpha),
            # which the constraint bounds by rho, is still well defined
            p = b / (2.0 * alpha)
            k = 0.0 if bnorm == 0.0 else float(np.linalg.norm(p) / bnorm)
        return BallSolution(p=p, k=k, case_tag=CASE_INTERIOR,
                            objective_value=problem.objective(p))
    if bnorm > 0:
        k = rho / bnorm
        p = k * b
        return BallSolution(p=p, k=k, case_tag=CASE_BOUNDARY,
                            objective_value=problem.objective(p))
    if alpha == 0.0:
        return BallSolution(p=np.zeros_like(b), k=0.0, case_tag=CASE_ZERO,
                            objective_value=0.0)
    # alpha < 0, b = 0: flat maximum on the sphere |p| = rho
    if tiebreak is None:
        d = np.zeros_like(b)
        d[0] = 1.0
    else:
        d = np.asarray(tiebreak, dtype=np.float64)
        nrm = np.linalg.norm(d)
        if nrm == 0:
            raise ValueError("tiebreak direction must be nonzero")
        d = d / nrm
    p = rho * d
    return BallSolution(p=p, k=np.nan, case_tag=CASE_DEGENERATE,
                        objective_value=problem.objective(p))


def brute_force_ball(problem: BallProblem, grid_per_axis: int = 21):
    """Exhaustive-grid oracle for solve_ball, n <= 3 only.

    Scans a uniform cube grid restricted to the ball plus a dense shell of
    boundary samples (spacing <= half the grid pitch) and returns the best
    point and its objective.
    """
    n = problem.b.shape[0]
    if n > 3:
        raise ValueError("brute-force oracle supports n <= 3")
    if grid_per_axis < 11:
        raise ValueError("grid_per_axis must be >= 11")
    rho = problem.rho
    axis = np.linspace(-rho, rho, grid_per_axis)
    mesh = np.meshgrid(*([axis] * n), indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=1)
    pts = pts[np.einsum("ij,ij->i", pts, pts) <= rho * rho]

    h = 2.0 * rho / (grid_per_axis - 1)
    shell = _sphere_samples(n, rho, max_spacing=0.5 * h)
    pts = np.concatenate([pts, shell])

    vals = -problem.alpha * np.einsum("ij,ij->i", pts, pts) + pts @ problem.b
    best = int(np.argmax(vals))
    return pts[best].copy(), float(vals[best])


def _sphere_samples(n: int, rho: float, max_spacing: float) -> Array:
    if n == 1:
        return np.array([[-rho], [rho]])
    if n == 2:
        count = max(8, int(np.ceil(2 * np.pi * rho / max_spacing)))
        ang = np.linspace(0.0, 2 * np.pi, count, endpoint=False)
        return rho * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    # Fibonacci sphere; neighbor spacing ~ sqrt(4 pi / count) * rho
    count = max(32, int(np.ceil(4 * np.pi * rho ** 2 / max_spacing ** 2)))
    i = np.arange(count) + 0.5
    phi = np.arccos(1 - 2 * i / count)
    theta = np.pi * (1 + np.sqrt(5.0)) * i
    return rho * np.stack([np.sin(phi) * np.cos(theta),
                           np.sin(phi) * np.sin(theta),
                           np.cos(phi)], axis=1)


def grid_error_bound(problem: BallProblem, grid_per_axis: int) -> float:
    """L * h bound on the brute-force gap: Lipschitz constant of the
    objective on the ball times the grid pitch."""
    L = 2.0 * abs(problem.alpha) * problem.rho + float(np.linalg.norm(problem.b))
    h = 2.0 * problem.rho / (grid_per_axis - 1)
    return L * h


# ---------------------------------------------------------------------------
# Bellman control subproblem
# ---------------------------------------------------------------------------

def curvature_from_derivatives(J_x: float, J_xx: float, domain: str) -> float:
    """Ball curvature alpha for the given wealth domain.

    Domain reals: alpha = -J_xx / 2.  Domain positive (log coordinate):
    the Hamiltonian carries an extra -J_x u'vv'u / 2 drift correction, so
    alpha = (J_x - J_xx) / 2.
    """
    if domain == DOMAIN_REALS:
        return -0.5 * J_xx
    if domain == DOMAIN_POSITIVE:
        return 0.5 * (J_x - J_xx)
    raise ValueError(f"unknown domain {domain!r}")


def solve_G0(J_x: float, J_xx: float, J_xy, coeffs: CoefficientSet,
             K: float, domain: str, tiebreak: Optional[Array] = None):
    """Pointwise maximizer of the control part of the Bellman operator.

    Returns (u, p, kappa, value): the optimal control u = (v')^-1 p, the
    ball maximizer p, the collinearity coefficient kappa with u =
    kappa (v')^-1 b (NaN in the degenerate case), and the achieved value.

    `tiebreak` is a control-space direction used only in the degenerate
    flat case; it is mapped through v' to the ball coordinates.
    """
    if K <= 0:
        raise ValueError("K must be > 0")
    J_xy = np.asarray(J_xy, dtype=np.float64)
    if not (np.isfinite(J_x) and np.isfinite(J_xx) and np.all(np.isfinite(J_xy))):
        raise ValueError("value-function derivatives must be finite")
    if J_xy.shape != (coeffs.m,):
        raise ValueError(f"J_xy must have shape ({coeffs.m},)")

    vT = coeffs.v.T
    try:
        theta = np.linalg.solve(coeffs.v, coeffs.a_tilde)
    except np.linalg.LinAlgError as exc:
        raise ValueError("volatility matrix is singular") from exc

    b = J_x * theta
    if coeffs.m:
        b = b + coeffs.beta_eta.T @ J_xy
    alpha = curvature_from_derivatives(J_x, J_xx, domain)

    d = None
    if tiebreak is not None:
        d = vT @ np.asarray(tiebreak, dtype=np.float64)
        if np.linalg.norm(d) == 0:
            d = None
    sol = solve_ball(BallProblem(alpha=alpha, b=b, rho=np.sqrt(K)), tiebreak=d)
    u = np.linalg.solve(vT, sol.p)
    return u, sol.p, sol.k, sol.objective_value


def solve_ball_field(alpha, b, rho: float, tiebreak_dir=None):
    """Vectorized solve_ball over trailing-batched inputs.

    alpha: (...,), b: (..., n), tiebreak_dir: unit directions (..., n) for
    degenerate nodes (defaults to e1).  Returns (p, kappa, case_code,
    value) with case codes from CASE_CODES.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    bnorm = np.linalg.norm(b, axis=-1)

    interior = (alpha > 0) & (bnorm <= 2.0 * alpha * rho)
    boundary = ~interior & (bnorm > 0)
    degenerate = ~interior & ~boundary & (alpha < 0)
    zero = ~interior & ~boundary & ~degenerate

    kappa = np.zeros_like(alpha)
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = np.where(interior, 0.5 / np.where(alpha > 0, alpha, 1.0), kappa)
        kappa = np.where(boundary, rho / np.where(bnorm > 0, bnorm, 1.0), kappa)
    kappa = np.where(degenerate, np.nan, kappa)

    with np.errstate(invalid="ignore"):
        p = np.where((interior | boundary)[..., None],
                     np.nan_to_num(kappa, nan=0.0)[..., None] * b, 0.0)
    if degenerate.any():
        if tiebreak_dir is None:
            d = np.zeros_like(b)
            d[..., 0] = 1.0
        else:
            d = np.asarray(tiebreak_dir, dtype=np.float64)
        p = np.where(degenerate[..., None], rho * d, p)

    value = -alpha * np.einsum("...i,...i->...", p, p) + np.einsum(
        "...i,...i->...", p, b)
    case = np.full(alpha.shape, CASE_CODES[CASE_ZERO], dtype=np.uint8)
    case[interior] = CASE_CODES[CASE_INTERIOR]
    case[boundary] = CASE_CODES[CASE_BOUNDARY]
    case[degenerate] = CASE_CODES[CASE_DEGENERATE]
    return p, kappa, case, value

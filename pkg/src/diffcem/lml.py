"""Temperature-scaled soft top-k projection onto the polytope
{y : 0 <= y <= 1, sum(y) = k}.

The projection maximizes x'y + tau*H_b(y) subject to the sum constraint,
where H_b is the elementwise binary entropy. Stationarity gives
y_i = sigmoid((x_i + nu)/tau) for a scalar dual nu, and sum_i y_i is strictly
increasing in nu, so the forward pass is a 1-D bracketing/bisection solve.
Mass goes to the LARGEST entries of x; callers optimizing costs must negate
(see optimizers).

The backward pass implicitly differentiates the stationarity system:
with d_i = y_i (1 - y_i), the Jacobian is

    J = (1/tau) * (diag(d) - d d' / (1'd))

which is symmetric, so the VJP and JVP coincide.

The solver runs on a row-batched matrix internally; ``lml_project`` is the
single-vector interface. Bisection runs past the guaranteed 1e-9 feasibility
tolerance, all the way to float resolution of the bracket (~55 halvings),
so that downstream finite-difference checks are not dominated by solver
noise: on saturated instances (sum of d_i tiny) even a 1e-12 feasibility
residual leaves a dual error large enough to pollute an h=1e-5 difference
quotient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .autodiff import CustomPrimitive, register_custom

# Keep y strictly inside (0, 1) even when expit saturates at 64-bit; the
# perturbation is ~1 ulp, far below every stated tolerance.
_Y_FLOOR = 1e-300
_Y_CAP = np.nextafter(1.0, 0.0)

_FEASIBILITY_TOL = 1e-9
_SOLVE_TOL = 0.0  # bisect to bracket collapse; exact zero ends early
_MAX_BISECT = 200
_MAX_EXPAND = 60


class BracketingError(RuntimeError):
    """Bisection could not enclose the dual root (should be unreachable)."""

    def __init__(self, msg, lo=None, hi=None):
        super().__init__(msg)
        self.bracket = (lo, hi)


class SaturationError(ValueError):
    """All projection coordinates saturated; the implicit Jacobian vanished."""


@dataclass
class LmlProblem:
    """Scores x in R^n, elite count 0 < k < n, temperature tau > 0."""

    x: np.ndarray
    k: int
    tau: float

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 1:
            raise ValueError(f"x must be a vector, got shape {self.x.shape}")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("x must be finite")
        n = self.x.shape[0]
        if not (0 < int(self.k) < n):
            raise ValueError(f"k must satisfy 0 < k < n, got k={self.k}, n={n}")
        self.k = int(self.k)
        if not (self.tau > 0):
            raise ValueError(f"tau must be > 0, got {self.tau} "
                             "(tau=0 is the hard top-k path in optimizers)")
        self.tau = float(self.tau)


@dataclass
class LmlSolution:
    y: np.ndarray
    nu: float
    iterations: int
    residual: float


def _solve_rows(x: np.ndarray, k: int, tau: float):
    """Solve the projection for every row of ``x``.

    Returns (y, nu, iterations, residual), each batched over rows.
    """
    x = np.asarray(x, dtype=np.float64)
    rows, n = x.shape

    def resid(nu):
        return expit((x + nu[:, None]) / tau).sum(axis=1) - k

    c = 10.0 + abs(np.log((n - k) / k))
    lo = -x.max(axis=1) - tau * c
    hi = -x.min(axis=1) + tau * c
    r_lo, r_hi = resid(lo), resid(hi)

    expansions = 0
    while np.any(r_lo > 0) or np.any(r_hi < 0):
        expansions += 1
        if expansions > _MAX_EXPAND:
            raise BracketingError(
                f"failed to bracket the dual after {_MAX_EXPAND} expansions",
                lo=lo.copy(), hi=hi.copy())
        width = hi - lo
        lo = np.where(r_lo > 0, lo - width, lo)
        hi = np.where(r_hi < 0, hi + width, hi)
        r_lo, r_hi = resid(lo), resid(hi)

    nu = 0.5 * (lo + hi)
    r = resid(nu)
    iters = np.ones(rows, dtype=np.int64)
    done = np.abs(r) <= _SOLVE_TOL
    for it in range(2, _MAX_BISECT + 1):
        if done.all():
            break
        shrink_hi = r > 0
        hi = np.where(~done & shrink_hi, nu, hi)
        lo = np.where(~done & ~shrink_hi, nu, lo)
        new_nu = 0.5 * (lo + hi)
        collapsed = (new_nu <= lo) | (new_nu >= hi)
        nu = np.where(done, nu, new_nu)
        r = np.where(done, r, resid(nu))
        iters = np.where(done, iters, it)
        done = done | (np.abs(r) <= _SOLVE_TOL) | collapsed

    y = np.clip(expit((x + nu[:, None]) / tau), _Y_FLOOR, _Y_CAP)
    residual = np.abs(y.sum(axis=1) - k)
    if np.any(residual > _FEASIBILITY_TOL):
        worst = int(np.argmax(residual))
        raise BracketingError(
            f"bisection stalled at residual {residual[worst]:.3e} > "
            f"{_FEASIBILITY_TOL}", lo=lo[worst], hi=hi[worst])
    return y, nu, iters, residual


def lml_project(p: LmlProblem) -> LmlSolution:
    """Project p.x onto the interior of the sum-to-k box polytope."""
    y, nu, iters, residual = _solve_rows(p.x[None, :], p.k, p.tau)
    return LmlSolution(y=y[0], nu=float(nu[0]), iterations=int(iters[0]),
                       residual=float(residual[0]))


def _vjp_rows(y: np.ndarray, tau: float, grad_out: np.ndarray) -> np.ndarray:
    d = y * (1.0 - y)
    s = d.sum(axis=1)
    if np.any(s < 1e-300):
        raise SaturationError("projection saturated; decrease |x|/tau")
    coef = (d * grad_out).sum(axis=1) / s
    return (d * grad_out - d * coef[:, None]) / tau


def lml_vjp(sol: LmlSolution, tau: float, grad_out: np.ndarray) -> np.ndarray:
    """J' @ grad_out for the implicit Jacobian at ``sol`` (J is symmetric)."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    return _vjp_rows(sol.y[None, :], float(tau), grad_out[None, :])[0]


def lml_as_primitive(k: int, tau: float) -> CustomPrimitive:
    """The projection as an autodiff primitive.

    The wrapped forward takes a score vector (one problem) or a matrix (one
    problem per row) and applies the projection with the fixed (k, tau).
    """
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")

    def forward(x):
        batched = x.ndim == 2
        rows = x if batched else x[None, :]
        if not (0 < int(k) < rows.shape[1]):
            raise ValueError(
                f"k must satisfy 0 < k < n, got k={k}, n={rows.shape[1]}")
        y, _, _, _ = _solve_rows(rows, k, tau)
        return (y if batched else y[0]), y

    def backward(ctx, g):
        y = ctx
        batched = g.ndim == 2
        rows = g if batched else g[None, :]
        out = _vjp_rows(y, tau, rows)
        return (out if batched else out[0],)

    return CustomPrimitive(name=f"lml(k={k},tau={tau:g})",
                           forward=forward, backward=backward)


def lml_topk(x, k: int, tau: float):
    """Convenience: apply the projection primitive to a Var or ndarray."""
    return register_custom(lml_as_primitive(k, tau), [x])

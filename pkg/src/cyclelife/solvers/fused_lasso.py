"""Fused lasso over an ordered feature axis, solved by ADMM.

Objective::

    ||y - b - X theta||^2 + lam1*||theta||_1 + lam2*sum_j |theta[j+1] - theta[j]|

Splitting ``theta = z``: the theta step is a ridge-like linear solve with a
cached factorization, the z step is the exact prox of the combined penalty
(1-D TV prox, then soft threshold), and ``u`` is the scaled dual.  Stops when both
primal ``||theta - z||`` and dual ``rho*||z - z_prev||`` residual norms fall
below the tolerance.

With ``adaptive_rho`` the penalty is rebalanced (residual balancing: double
``rho`` when the primal residual dominates by 10x, halve it in the opposite
case, rescale ``u``).  Updates are checked every ``RHO_EVERY`` iterations and
capped at ``MAX_RHO_UPDATES``, after which ``rho`` is fixed and the usual
ADMM convergence guarantee applies.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg

from ..errors import ConvergenceError
from ..features import FeatureMatrix
from .linear import FusedLassoConfig, LinearModel, ensure_standardized, fused_objective
from .prox import fused_prox

RHO_EVERY = 10
MAX_RHO_UPDATES = 60


class _RidgeSolver:
    """Solves ``(2 Xc^T Xc + rho I) x = rhs``; Woodbury form when p > n."""

    def __init__(self, Xc: np.ndarray, rho: float):
        n, p = Xc.shape
        self.Xc = Xc
        self.rho = rho
        self.wide = p > n
        if self.wide:
            K = Xc @ Xc.T + (rho / 2.0) * np.eye(n)
            self.factor = linalg.cho_factor(K)
        else:
            self.factor = linalg.cho_factor(2.0 * Xc.T @ Xc + rho * np.eye(p))

    def __call__(self, rhs: np.ndarray) -> np.ndarray:
        if not self.wide:
            return linalg.cho_solve(self.factor, rhs)
        w = linalg.cho_solve(self.factor, self.Xc @ rhs)
        return (rhs - self.Xc.T @ w) / self.rho


def fit_fused_lasso(
    fm: FeatureMatrix,
    cfg: FusedLassoConfig,
    warm_start: LinearModel | None = None,
) -> LinearModel:
    """Fit the fused lasso; columns must follow the ordered (voltage) axis."""
    fm = ensure_standardized(fm)
    X, y = fm.values, fm.target
    n, p = X.shape
    rho = cfg.admm_rho
    xm = X.mean(axis=0)
    Xc = X - xm
    ymean = float(y.mean())
    q = 2.0 * Xc.T @ (y - ymean)
    solve = _RidgeSolver(Xc, rho)
    lam_tv, lam_l1 = cfg.lam2 / rho, cfg.lam1 / rho

    if warm_start is not None:
        z = np.array(warm_start.coefficients, dtype=float).copy()
    else:
        z = np.zeros(p)
    u = np.zeros(p)
    r_norm = s_norm = np.inf
    updates = 0
    for it in range(1, cfg.max_iters + 1):
        theta = solve(q + rho * (z - u))
        z_prev = z
        z = fused_prox(theta + u, lam_tv, lam_l1)
        u += theta - z
        r_norm = float(np.linalg.norm(theta - z))
        s_norm = float(rho * np.linalg.norm(z - z_prev))
        if r_norm < cfg.tolerance and s_norm < cfg.tolerance:
            break
        if cfg.adaptive_rho and it % RHO_EVERY == 0 and updates < MAX_RHO_UPDATES:
            scale = 2.0 if r_norm > 10.0 * s_norm else 0.5 if s_norm > 10.0 * r_norm else 1.0
            if scale != 1.0:
                rho *= scale
                u /= scale
                solve = _RidgeSolver(Xc, rho)
                lam_tv, lam_l1 = cfg.lam2 / rho, cfg.lam1 / rho
                updates += 1
    else:
        last = LinearModel(z, ymean - xm @ z, fm.columns, fm.scaling, fm.target_transform,
                           cfg.to_dict(), {"iterations": cfg.max_iters, "converged": False})
        raise ConvergenceError(
            f"fused lasso (lambda1={cfg.lam1:g}, lambda2={cfg.lam2:g}) did not converge in "
            f"{cfg.max_iters} ADMM iterations; primal residual {r_norm:.3g}, dual residual {s_norm:.3g}",
            model=last,
            primal_residual=r_norm,
            dual_residual=s_norm,
        )

    b = ymean - float(xm @ z)
    info = {
        "iterations": it,
        "converged": True,
        "primal_residual": r_norm,
        "dual_residual": s_norm,
        "rho": rho,
        "objective": fused_objective(X, y, z, b, cfg.lam1, cfg.lam2),
    }
    return LinearModel(z, b, fm.columns, fm.scaling, fm.target_transform, cfg.to_dict(), info)


def count_pieces(coefficients, atol: float = 0.0) -> int:
    """Number of maximal runs of equal consecutive coefficients."""
    c = np.asarray(coefficients, dtype=float)
    if c.size == 0:
        return 0
    return int(1 + np.sum(np.abs(np.diff(c)) > atol))

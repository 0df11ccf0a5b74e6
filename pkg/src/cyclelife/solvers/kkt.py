"""Stationarity certificates for fitted models."""

from __future__ import annotations

import numpy as np
from scipy import optimize, sparse

from ..features import FeatureMatrix
from .linear import ENConfig, FusedLassoConfig, LinearModel, design_for


def _gradient(model: LinearModel, fm: FeatureMatrix):
    X = design_for(model, fm)
    r = fm.target - model.intercept - X @ model.coefficients
    return -2.0 * X.T @ r, 2.0 * abs(r.sum())


def _en_residual(theta, grad, lam, alpha) -> float:
    nz = theta != 0
    out = np.zeros_like(theta)
    out[nz] = np.abs(grad[nz] + lam * (1 - alpha) * theta[nz] + lam * alpha * np.sign(theta[nz]))
    out[~nz] = np.maximum(np.abs(grad[~nz]) - lam * alpha, 0.0)
    return float(out.max()) if out.size else 0.0


def _fused_residual(theta, grad, lam1, lam2) -> float:
    """min over valid subgradients (s, t) of ||grad + lam1*s + lam2*D^T t||_inf, as an LP."""
    p = theta.size
    if p == 0:
        return 0.0
    d = np.diff(theta)
    m = p - 1
    # variables: s (p), t (m), eps (1)
    lo = np.concatenate([np.where(theta > 0, 1.0, np.where(theta < 0, -1.0, -1.0)),
                         np.where(d > 0, 1.0, np.where(d < 0, -1.0, -1.0)), [0.0]])
    hi = np.concatenate([np.where(theta > 0, 1.0, np.where(theta < 0, -1.0, 1.0)),
                         np.where(d > 0, 1.0, np.where(d < 0, -1.0, 1.0)), [np.inf]])
    # (D^T t)_j = t_{j-1} - t_j
    DT = sparse.diags([np.ones(m), -np.ones(m)], [-1, 0], shape=(p, m), format="csr")
    M = sparse.hstack([lam1 * sparse.identity(p, format="csr"), lam2 * DT]).tocsr()
    ones = sparse.csr_matrix(np.ones((p, 1)))
    A = sparse.vstack([sparse.hstack([M, -ones]), sparse.hstack([-M, -ones])]).tocsr()
    b = np.concatenate([-grad, grad])
    c = np.zeros(p + m + 1)
    c[-1] = 1.0
    res = optimize.linprog(c, A_ub=A, b_ub=b, bounds=list(zip(lo, hi)), method="highs")
    if res.status != 0:
        # constraint set is a nonempty box so this only triggers on solver trouble
        return float(np.max(np.abs(grad)) + lam1 + 2 * lam2)
    return float(res.x[-1])


def kkt_residual(model: LinearModel, fm: FeatureMatrix, cfg=None) -> float:
    """Largest violation of the optimality conditions of ``cfg``'s objective at ``model``.

    ``cfg=None`` checks plain least squares (gradient must vanish).  The
    intercept condition (residuals summing to zero) is always included.
    """
    grad, g0 = _gradient(model, fm)
    theta = model.coefficients
    if cfg is None:
        body = float(np.max(np.abs(grad))) if grad.size else 0.0
    elif isinstance(cfg, ENConfig):
        body = _en_residual(theta, grad, cfg.lam, cfg.alpha)
    elif isinstance(cfg, FusedLassoConfig):
        body = _fused_residual(theta, grad, cfg.lam1, cfg.lam2)
    else:
        raise TypeError(f"unsupported config type {type(cfg).__name__}")
    return max(body, g0)

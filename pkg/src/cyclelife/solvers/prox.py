"""Proximal kernels: scalar soft thresholding and exact 1-D total variation."""

from __future__ import annotations

import numpy as np


def soft_threshold(z, gamma):
    """``sign(z) * max(|z| - gamma, 0)``; works on scalars and arrays."""
    if np.any(np.asarray(gamma) < 0):
        raise ValueError("soft_threshold needs gamma >= 0")
    if np.ndim(z) == 0:
        z = float(z)
        if z > gamma:
            return z - gamma
        if z < -gamma:
            return z + gamma
        return 0.0
    z = np.asarray(z, dtype=float)
    return np.sign(z) * np.maximum(np.abs(z) - gamma, 0.0)


def tv_prox_1d(v, lam: float) -> np.ndarray:
    """Exact minimizer of ``0.5*||x - v||^2 + lam * sum_j |x[j+1] - x[j]|``.

    Dynamic programming over the piecewise-linear derivative of the
    partial objectives (Johnson, "A dynamic programming algorithm for the
    fused lasso and L0-segmentation", JCGS 2013).  Each step adds two knots
    and removes the knots it passes, so the cost is O(n) for any input;
    the taut-string scheme of Condat degrades to O(n^2) on long monotone
    stretches, which is what ADMM iterates on smooth profiles look like.
    The output is piecewise constant and preserves the mean of ``v``.
    """
    y = np.asarray(v, dtype=float)
    if lam < 0:
        raise ValueError("tv_prox_1d needs lam >= 0")
    n = y.size
    if n <= 1 or lam == 0:
        return y.copy()
    y = y.tolist()
    # knots x[l..r] of the derivative, with slope/offset increments a, b
    x = [0.0] * (2 * n)
    a = [0.0] * (2 * n)
    b = [0.0] * (2 * n)
    tm = [0.0] * (n - 1)  # back-pointers: clip x[k] to [tm[k], tp[k]]
    tp = [0.0] * (n - 1)
    tm[0], tp[0] = y[0] - lam, y[0] + lam
    l, r = n - 1, n
    x[l], x[r] = tm[0], tp[0]
    a[l], b[l] = 1.0, lam - y[0]
    a[r], b[r] = -1.0, y[0] + lam
    afirst, bfirst = 1.0, -lam - y[1]
    alast, blast = -1.0, y[1] - lam
    for k in range(1, n - 1):
        alo, blo, lo = afirst, bfirst, l
        while lo <= r and alo * x[lo] + blo <= -lam:
            alo += a[lo]
            blo += b[lo]
            lo += 1
        ahi, bhi, hi = alast, blast, r
        while hi >= lo and -ahi * x[hi] - bhi >= lam:
            ahi += a[hi]
            bhi += b[hi]
            hi -= 1
        tm[k] = (-lam - blo) / alo
        tp[k] = (lam + bhi) / (-ahi)
        l, r = lo - 1, hi + 1
        x[l], x[r] = tm[k], tp[k]
        a[l], b[l] = alo, blo + lam
        a[r], b[r] = ahi, bhi + lam
        afirst, bfirst = 1.0, -lam - y[k + 1]
        alast, blast = -1.0, y[k + 1] - lam
    alo, blo, lo = afirst, bfirst, l
    while lo <= r and alo * x[lo] + blo <= 0.0:
        alo += a[lo]
        blo += b[lo]
        lo += 1
    out = [0.0] * n
    cur = out[n - 1] = -blo / alo
    for k in range(n - 2, -1, -1):
        if cur > tp[k]:
            cur = tp[k]
        elif cur < tm[k]:
            cur = tm[k]
        out[k] = cur
    return np.array(out)


def fused_prox(v, lam_tv: float, lam_l1: float) -> np.ndarray:
    """Prox of ``lam_l1*||x||_1 + lam_tv*TV(x)``: TV prox followed by soft thresholding."""
    return soft_threshold(tv_prox_1d(v, lam_tv), lam_l1)

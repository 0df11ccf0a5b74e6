"""Predictive metrics, residual checks and bootstrap coefficient intervals."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from .errors import CycleLifeError, DataError
from .features import FeatureMatrix
from .solvers import LinearModel


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    rmse: float
    r2: float
    aape_percent: float
    n: int
    scale: str = "transformed"

    def as_row(self) -> dict:
        return {"scale": self.scale, "n": self.n, "mse": self.mse, "rmse": self.rmse,
                "r2": self.r2, "aape_percent": self.aape_percent}


def compute_metrics(y, y_hat, scale: str = "transformed", aape: bool = True) -> MetricsReport:
    """MSE, RMSE, R^2 (SST about mean of y) and average absolute percent error.

    ``aape=False`` skips the percent error (reported as NaN) for targets that
    may contain zeros.
    """
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.ndim != 1:
        raise DataError("y and y_hat must be 1-D arrays of equal length")
    if y.size < 2:
        raise DataError("metrics need at least 2 observations")
    resid = y - y_hat
    sse = float(resid @ resid)
    mse = sse / y.size
    dev = y - y.mean()
    sst = float(dev @ dev)
    if sst > 0:
        r2 = 1.0 - sse / sst
    else:
        r2 = 1.0 if sse == 0 else float("nan")
    if aape:
        if np.any(y == 0):
            raise DataError("AAPE undefined: target contains zeros")
        ape = 100.0 * float(np.mean(np.abs(resid) / np.abs(y)))
    else:
        ape = float("nan")
    return MetricsReport(mse, float(np.sqrt(mse)), r2, ape, int(y.size), scale)


@dataclass(frozen=True)
class ResidualReport:
    residual_mean: float
    chi_square_statistic: float
    chi_square_p: float
    dof: int
    bins: int
    observed: np.ndarray
    expected: float
    qq_points: np.ndarray  # columns: theoretical quantile, sample quantile
    standard_quantiles: np.ndarray  # unscaled N(0, 1) quantiles at (i - 0.5)/n


def residual_diagnostics(residuals, bins: int = 10) -> ResidualReport:
    """Chi-square normality check with equal-probability bins, plus Q-Q pairs.

    The reference normal uses the sample mean and standard deviation
    (ddof=1); with two fitted parameters the test has ``bins - 3`` degrees
    of freedom.  Q-Q theoretical quantiles sit at plotting positions
    ``(i - 0.5)/n``, mapped through the same fitted normal.
    """
    r = np.asarray(residuals, dtype=float).reshape(-1)
    n = r.size
    if bins < 5:
        raise DataError(f"chi-square test needs at least 5 bins, got {bins}")
    if n < 20:
        raise DataError(f"residual diagnostics need n >= 20, got {n}")
    expected = n / bins
    if expected < 5:
        raise DataError(
            f"{n} residuals give {expected:.2f} expected counts per bin (< 5); "
            f"use at most {n // 5} bins"
        )
    mean = float(r.mean())
    sd = float(r.std(ddof=1))
    if not sd > 0:
        raise DataError("residuals are constant; normality test undefined")
    z = (r - mean) / sd
    edges = stats.norm.ppf(np.arange(1, bins) / bins)
    observed = np.bincount(np.searchsorted(edges, z, side="right"), minlength=bins).astype(float)
    stat = float(np.sum((observed - expected) ** 2) / expected)
    dof = bins - 3
    p = float(stats.chi2.sf(stat, dof))
    std_q = stats.norm.ppf((np.arange(1, n + 1) - 0.5) / n)
    qq = np.column_stack([mean + sd * std_q, np.sort(r)])
    return ResidualReport(mean, stat, min(max(p, 0.0), 1.0), dof, bins, observed, expected, qq, std_q)


@dataclass(frozen=True)
class CoefficientCI:
    feature: str
    estimate: float
    lower: float
    upper: float

    @property
    def spans_zero(self) -> bool:
        return self.lower < 0 < self.upper


def _group_rows(fm: FeatureMatrix, groups: Mapping[str, str]):
    members: dict[str, list[int]] = {}
    for i, cid in enumerate(fm.rows):
        members.setdefault(groups[cid], []).append(i)
    return [np.array(members[g]) for g in sorted(members)]


def bootstrap_ci(
    fm: FeatureMatrix,
    fitter: Callable[[FeatureMatrix], LinearModel],
    groups: Mapping[str, str],
    B: int = 200,
    level: float = 0.95,
    seed: int = 0,
    threads: int = 1,
    max_failure_rate: float = 0.01,
) -> list[CoefficientCI]:
    """Percentile intervals for raw-unit slopes from group-level bootstrap refits.

    Resample ``b`` draws groups with replacement using its own generator
    seeded by ``(seed, b)``, so results do not depend on execution order.
    """
    if B < 200:
        raise DataError(f"bootstrap needs B >= 200 resamples, got {B}")
    if not 0 < level < 1:
        raise DataError(f"confidence level must lie in (0, 1), got {level}")
    raw = fm.take(np.arange(len(fm.rows)))
    blocks = _group_rows(raw, groups)
    estimate, _ = fitter(raw).raw_coefficients()

    def one(b):
        rng = np.random.default_rng([seed, b])
        pick = rng.integers(0, len(blocks), size=len(blocks))
        idx = np.concatenate([blocks[g] for g in pick])
        try:
            return fitter(raw.take(idx)).raw_coefficients()[0]
        except CycleLifeError:
            return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            draws = list(pool.map(one, range(B)))
    else:
        draws = [one(b) for b in range(B)]
    ok = [d for d in draws if d is not None]
    failures = B - len(ok)
    if failures > max_failure_rate * B:
        raise DataError(
            f"bootstrap refits failed in {failures}/{B} resamples "
            f"(> {100 * max_failure_rate:g}%); the fit is unstable under resampling"
        )
    samples = np.vstack(ok)
    lo, hi = np.percentile(samples, [50 * (1 - level), 50 * (1 + level)], axis=0)
    return [
        CoefficientCI(name, float(e), float(a), float(b))
        for name, e, a, b in zip(raw.columns, estimate, lo, hi)
    ]


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def write_metrics(rows: Sequence[tuple[str, MetricsReport]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "scale", "n", "mse", "rmse", "r2", "aape_percent"])
        for split, m in rows:
            w.writerow([split, m.scale, m.n, repr(m.mse), repr(m.rmse), repr(m.r2), repr(m.aape_percent)])


def write_diagnostics(path, residuals=None, cell_ids=None, report: ResidualReport | None = None,
                      cis: Sequence[CoefficientCI] | None = None, metrics=None) -> None:
    """Single delimited file with ``[section]`` blocks: metrics, residual test, residuals, qq, ci."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if metrics:
            fh.write("[metrics]\n")
            w.writerow(["split", "scale", "n", "mse", "rmse", "r2", "aape_percent"])
            for split, m in metrics:
                w.writerow([split, m.scale, m.n, repr(m.mse), repr(m.rmse), repr(m.r2), repr(m.aape_percent)])
        if report is not None:
            fh.write("[residual_test]\n")
            w.writerow(["residual_mean", "chi_square_statistic", "chi_square_p", "dof", "bins"])
            w.writerow([repr(report.residual_mean), repr(report.chi_square_statistic),
                        repr(report.chi_square_p), report.dof, report.bins])
        if residuals is not None:
            fh.write("[residuals]\n")
            w.writerow(["cell_id", "residual"])
            ids = cell_ids if cell_ids is not None else range(len(residuals))
            for cid, e in zip(ids, residuals):
                w.writerow([cid, repr(float(e))])
        if report is not None:
            fh.write("[qq]\n")
            w.writerow(["theoretical_quantile", "sample_quantile", "standard_normal_quantile"])
            for (t, s), z in zip(report.qq_points, report.standard_quantiles):
                w.writerow([repr(float(t)), repr(float(s)), repr(float(z))])
        if cis:
            fh.write("[coefficient_ci]\n")
            w.writerow(["feature", "estimate", "lower", "upper", "spans_zero"])
            for c in cis:
                w.writerow([c.feature, repr(c.estimate), repr(c.lower), repr(c.upper), str(c.spans_zero).lower()])

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cyclelife.diagnostics import (
    CoefficientCI,
    bootstrap_ci,
    compute_metrics,
    residual_diagnostics,
    write_diagnostics,
    write_metrics,
)
from cyclelife.errors import DataError
from cyclelife.features import FeatureMatrix, standardize
from cyclelife.model_selection import Fitter
from cyclelife.solvers import fit_ols, predict


def test_metrics_perfect():
    y = np.array([100.0, 250.0, 400.0])
    m = compute_metrics(y, y.copy())
    assert (m.mse, m.rmse, m.r2, m.aape_percent) == (0.0, 0.0, 1.0, 0.0)


def test_metrics_mean_predictor():
    y = np.array([1.0, 2.0, 6.0])
    assert compute_metrics(y, np.full(3, y.mean())).r2 == 0.0


def test_metrics_hand_example():
    m = compute_metrics([100.0, 200.0], [110.0, 180.0], scale="cycles")
    assert m.rmse == pytest.approx(np.sqrt(250.0), abs=1e-12)
    assert m.rmse == pytest.approx(15.8114, abs=1e-4)
    assert m.aape_percent == pytest.approx(10.0, abs=1e-12)
    assert m.scale == "cycles" and m.n == 2


def test_metrics_errors():
    with pytest.raises(DataError, match="AAPE"):
        compute_metrics([0.0, 1.0], [0.1, 1.0])
    assert np.isnan(compute_metrics([0.0, 1.0], [0.1, 1.0], aape=False).aape_percent)
    with pytest.raises(DataError):
        compute_metrics([1.0], [1.0])
    with pytest.raises(DataError):
        compute_metrics([1.0, 2.0], [1.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 50), st.floats(-1e3, 1e3))
def test_metric_identities(seed, n, c):
    rng = np.random.default_rng(seed)
    y = rng.uniform(1, 10, n)
    yhat = y + rng.normal(size=n)
    m = compute_metrics(y, yhat)
    assert abs(m.rmse ** 2 - m.mse) <= 1e-12 * max(1.0, m.mse)
    assert m.r2 <= 1.0 and m.aape_percent >= 0.0
    if np.ptp(y) > 0:
        shifted = compute_metrics(y + c, yhat + c, aape=False)
        assert abs(shifted.r2 - m.r2) <= 1e-10 * max(1.0, abs(m.r2))


def test_residual_report_basics():
    r = np.random.default_rng(0).normal(size=200)
    rep = residual_diagnostics(r, bins=10)
    assert rep.dof == 7 and rep.observed.sum() == 200 and rep.expected == 20.0
    assert 0.0 <= rep.chi_square_p <= 1.0
    assert np.all(np.diff(rep.qq_points[:, 0]) > 0)
    assert np.array_equal(rep.qq_points[:, 1], np.sort(r))
    assert rep.residual_mean == pytest.approx(r.mean())


def test_residual_report_errors():
    r = np.random.default_rng(0).normal(size=30)
    with pytest.raises(DataError, match="at most 6 bins"):
        residual_diagnostics(r, bins=10)
    with pytest.raises(DataError):
        residual_diagnostics(r, bins=4)
    with pytest.raises(DataError):
        residual_diagnostics(r[:19], bins=5)
    with pytest.raises(DataError):
        residual_diagnostics(np.ones(50), bins=5)


def test_qq_identity_on_normal_quantiles():
    n = 1000
    z = stats.norm.ppf((np.arange(1, n + 1) - 0.5) / n)
    rep = residual_diagnostics(z[::-1].copy(), bins=10)
    # sample quantiles against the standard-normal quantiles: exact identity
    assert np.max(np.abs(rep.qq_points[:, 1] - rep.standard_quantiles)) <= 1e-6
    # fitted-normal theoretical quantiles are collinear with the sample ones
    slope, icpt = np.polyfit(rep.qq_points[:, 0], rep.qq_points[:, 1], 1)
    assert abs(np.corrcoef(rep.qq_points.T)[0, 1] - 1) <= 1e-12 and abs(icpt) <= 1e-12


def test_chi_square_affine_invariant():
    r = np.random.default_rng(1).normal(size=400)
    a = residual_diagnostics(r, 10).chi_square_statistic
    b = residual_diagnostics(3.7 * r - 12.0, 10).chi_square_statistic
    assert abs(a - b) <= 1e-10


def test_chi_square_negative_control():
    r = np.random.default_rng(2).exponential(size=1000)
    assert residual_diagnostics(r, 10).chi_square_p < 0.01


def test_chi_square_mostly_accepts_normal():
    rejections = sum(
        residual_diagnostics(np.random.default_rng(s).normal(size=1000), 10).chi_square_p < 0.05
        for s in range(50)
    )
    assert rejections <= 8


def test_ols_training_residual_mean_zero():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(40, 3))
    y = X @ [1, 2, 3] + 5 + rng.normal(size=40)
    fm = FeatureMatrix([f"c{i}" for i in range(40)], ["a", "b", "c"], X, y)
    m = fit_ols(fm)
    assert abs(np.mean(y - predict(m, fm))) <= 1e-8


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------

def boot_problem(seed, coef, noise, n=40, n_groups=20):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, len(coef)))
    y = X @ np.asarray(coef, dtype=float) + 1.0 + noise * rng.normal(size=n)
    ids = [f"c{i:02d}" for i in range(n)]
    fm = FeatureMatrix(ids, [f"x{j}" for j in range(len(coef))], X, y)
    return fm, {cid: f"g{i % n_groups}" for i, cid in enumerate(ids)}


def test_bootstrap_degenerate_on_exact_data():
    fm, groups = boot_problem(0, [2.0, -1.0], noise=0.0)
    cis = bootstrap_ci(fm, Fitter("ols").at(()), groups, B=200, seed=0)
    for ci, true in zip(cis, [2.0, -1.0]):
        assert abs(ci.lower - true) <= 1e-8 and abs(ci.upper - true) <= 1e-8
        assert abs(ci.estimate - true) <= 1e-8


def test_bootstrap_zero_coefficient_spans_zero():
    spans = 0
    for seed in range(50):
        fm, groups = boot_problem(seed, [0.0, 1.0], noise=1.0, n=400, n_groups=100)
        cis = bootstrap_ci(fm, Fitter("ols").at(()), groups, B=200, seed=seed)
        spans += cis[0].spans_zero
    assert spans >= 45


def test_bootstrap_strong_coefficient():
    fm, groups = boot_problem(1, [5.0], noise=0.1)
    (ci,) = bootstrap_ci(fm, Fitter("elastic_net").at((0.01, 1.0)), groups, B=200, seed=1)
    assert not ci.spans_zero and ci.lower <= ci.upper
    assert ci.lower == pytest.approx(5.0, abs=0.2)


def test_bootstrap_deterministic_and_thread_safe():
    fm, groups = boot_problem(2, [1.0, 0.5], noise=0.5)
    fit = Fitter("elastic_net").at((0.1, 0.5))
    a = bootstrap_ci(fm, fit, groups, B=200, seed=7)
    b = bootstrap_ci(fm, fit, groups, B=200, seed=7, threads=3)
    assert a == b


def test_bootstrap_argument_checks():
    fm, groups = boot_problem(3, [1.0], noise=0.5)
    with pytest.raises(DataError, match="B >= 200"):
        bootstrap_ci(fm, Fitter("ols").at(()), groups, B=50)
    with pytest.raises(DataError):
        bootstrap_ci(fm, Fitter("ols").at(()), groups, level=1.5)


def test_bootstrap_failure_rate():
    fm, groups = boot_problem(4, [1.0, 1.0], noise=0.5, n=6, n_groups=3)
    # three groups of two: many resamples repeat a group and lose rank
    with pytest.raises(DataError, match="unstable"):
        bootstrap_ci(fm, Fitter("ols").at(()), groups, B=200)


def test_spans_zero_flag():
    assert CoefficientCI("x", 0.1, -0.1, 0.3).spans_zero
    assert not CoefficientCI("x", 0.1, 0.0, 0.3).spans_zero


def test_exports(tmp_path):
    y = np.linspace(1, 3, 30)
    yhat = y + np.random.default_rng(0).normal(scale=0.1, size=30)
    m = compute_metrics(y, yhat)
    write_metrics([("train", m)], tmp_path / "metrics.csv")
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "split,scale,n,mse,rmse,r2,aape_percent" and lines[1].startswith("train,transformed,30,")
    rep = residual_diagnostics(y - yhat, bins=5)
    cis = [CoefficientCI("x", 1.0, 0.5, 1.5)]
    write_diagnostics(tmp_path / "diag.csv", y - yhat, [f"c{i}" for i in range(30)], rep, cis, [("train", m)])
    text = (tmp_path / "diag.csv").read_text()
    for section in ("[metrics]", "[residual_test]", "[residuals]", "[qq]", "[coefficient_ci]"):
        assert section in text
    assert "x,1.0,0.5,1.5,false" in text

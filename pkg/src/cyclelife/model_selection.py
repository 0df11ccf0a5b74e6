"""Grouped k-fold cross-validation, grid search and final-model fitting.

Whole groups (production batch, protocol...) go to one fold so that
validation error is never flattered by group-level biases.  Each fold fit
standardizes with its own training statistics only.
"""

from __future__ import annotations

import csv
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ConvergenceError, DataError
from .features import FeatureMatrix
from .solvers import (
    ENConfig,
    FusedLassoConfig,
    LinearModel,
    ensure_standardized,
    fit_elastic_net,
    fit_fused_lasso,
    fit_ols,
    predict,
)

TIE_TOL = 1e-12


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    assignment: dict[str, int]

    def fold_of(self, cell_id: str) -> int:
        return self.assignment[cell_id]

    def folds(self) -> list[list[str]]:
        out: list[list[str]] = [[] for _ in range(self.k)]
        for cid in sorted(self.assignment):
            out[self.assignment[cid]].append(cid)
        return out


def grouped_kfold(groups: Mapping[str, str], k: int = 5, seed: int = 0) -> FoldAssignment:
    """Shuffle groups with a seeded RNG, then give each to the fold with the fewest cells."""
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}", field="cv.k")
    members: dict[str, list[str]] = {}
    for cid in sorted(groups):
        members.setdefault(groups[cid], []).append(cid)
    names = sorted(members)
    if len(names) < k:
        raise DataError(f"grouped {k}-fold CV needs at least {k} groups, found {len(names)}")
    order = np.random.default_rng(seed).permutation(len(names))
    counts = [0] * k
    assignment = {}
    for gi in order:
        g = names[gi]
        fold = min(range(k), key=lambda f: (counts[f], f))
        counts[fold] += len(members[g])
        for cid in members[g]:
            assignment[cid] = fold
    return FoldAssignment(k, assignment)


# ---------------------------------------------------------------------------
# Fitters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Fitter:
    """Named fit operation mapping (feature matrix, grid point) to a LinearModel."""

    kind: str
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PARAM_NAMES:
            raise ConfigError(
                f"unknown model kind {self.kind!r}; expected one of {', '.join(PARAM_NAMES)}",
                field="model.kind",
            )

    @property
    def param_names(self) -> tuple[str, ...]:
        return PARAM_NAMES[self.kind]

    def config(self, point: Sequence[float]):
        if self.kind == "elastic_net":
            lam, alpha = point
            return ENConfig(lam=float(lam), alpha=float(alpha), **self.options)
        if self.kind == "fused_lasso":
            l1, l2 = point
            return FusedLassoConfig(lam1=float(l1), lam2=float(l2), **self.options)
        return None

    def fit(self, fm: FeatureMatrix, point: Sequence[float] = ()) -> LinearModel:
        if self.kind == "ols":
            return fit_ols(ensure_standardized(fm))
        if self.kind == "elastic_net":
            return fit_elastic_net(fm, self.config(point))
        return fit_fused_lasso(fm, self.config(point))

    def at(self, point: Sequence[float]) -> Callable[[FeatureMatrix], LinearModel]:
        """Fixed-hyperparameter fit function."""
        return lambda fm: self.fit(fm, point)


PARAM_NAMES = {
    "ols": (),
    "elastic_net": ("lambda", "alpha"),
    "fused_lasso": ("lambda1", "lambda2"),
}


def as_fitter(fitter) -> Fitter:
    if isinstance(fitter, Fitter):
        return fitter
    if isinstance(fitter, str):
        return Fitter(fitter)
    raise TypeError("fitter must be a Fitter or a model kind name")


def expand_grid(grid: Mapping[str, Sequence[float]] | Sequence[Sequence[float]], fitter: Fitter) -> list[tuple]:
    """Cartesian product of a ``{param: values}`` mapping, or a list of explicit points."""
    names = fitter.param_names
    if isinstance(grid, Mapping):
        unknown = set(grid) - set(names)
        missing = set(names) - set(grid)
        if unknown or missing:
            raise ConfigError(
                f"grid keys {sorted(grid)} do not match {fitter.kind} parameters {list(names)}",
                field="model.grid",
            )
        points = [tuple(float(v) for v in combo) for combo in itertools.product(*(grid[n] for n in names))]
    else:
        points = [tuple(float(v) for v in pt) for pt in grid]
    if not names:
        points = [()]
    if not points:
        raise ConfigError("hyperparameter grid is empty", field="model.grid")
    for pt in points:
        if len(pt) != len(names):
            raise ConfigError(f"grid point {pt} does not have {len(names)} values", field="model.grid")
    return points


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

@dataclass
class CVResult:
    param_names: tuple[str, ...]
    grid: list[tuple]
    fold_errors: np.ndarray
    mean_error: np.ndarray
    std_error: np.ndarray
    best_index: int
    k: int
    seed: int
    folds: FoldAssignment
    fold_models: dict | None = None

    @property
    def best_point(self) -> tuple:
        return self.grid[self.best_index]

    def best_params(self) -> dict[str, float]:
        return dict(zip(self.param_names, self.best_point))

    def write_csv(self, path) -> None:
        """Fold-level rows ``<params>,fold,rmse`` followed by a ``#`` summary block."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*self.param_names, "fold", "rmse"])
            for pt, errs in zip(self.grid, self.fold_errors):
                for f, e in enumerate(errs):
                    w.writerow([*(repr(v) for v in pt), f, repr(float(e))])
            fh.write("# summary\n")
            w.writerow(["# best_point", *(f"{n}={v!r}" for n, v in zip(self.param_names, self.best_point))])
            w.writerow(["# best_mean_rmse", repr(float(self.mean_error[self.best_index]))])
            w.writerow(["# k", self.k])
            w.writerow(["# seed", self.seed])


def _select(grid, mean, se, one_se: bool) -> int:
    best = float(np.min(mean))
    cutoff = best + (se[int(np.argmin(mean))] if one_se else TIE_TOL)
    candidates = [i for i, m in enumerate(mean) if m <= cutoff]
    # prefer the sparsest/most regularized point: largest first param, then second
    return max(candidates, key=lambda i: (grid[i], -i))


def _rmse(a, b) -> float:
    d = np.asarray(a) - np.asarray(b)
    return float(np.sqrt(np.mean(d * d)))


def _fold_indices(fm: FeatureMatrix, folds: FoldAssignment):
    try:
        fold_of_row = np.array([folds.assignment[cid] for cid in fm.rows])
    except KeyError as exc:
        raise DataError(f"cell {exc.args[0]} has no group/fold assignment") from exc
    return [(np.flatnonzero(fold_of_row != f), np.flatnonzero(fold_of_row == f)) for f in range(folds.k)]


def grid_search_cv(
    fm: FeatureMatrix,
    groups: Mapping[str, str],
    grid,
    k: int = 5,
    seed: int = 0,
    fitter="elastic_net",
    one_se: bool = False,
    threads: int = 1,
    keep_models: bool = False,
) -> CVResult:
    """Grouped k-fold grid search scored by holdout RMSE on the transformed target."""
    fitter = as_fitter(fitter)
    points = expand_grid(grid, fitter)
    sub_groups = {cid: groups[cid] for cid in fm.rows if cid in groups}
    if len(sub_groups) != len(fm.rows):
        missing = [cid for cid in fm.rows if cid not in groups]
        raise DataError(f"no group_id for cell(s): {', '.join(missing[:10])}")
    folds = grouped_kfold(sub_groups, k, seed)
    splits = _fold_indices(fm, folds)
    raw = fm.take(np.arange(len(fm.rows)))

    def task(pi_f):
        pi, f = pi_f
        tr, te = splits[f]
        try:
            model = fitter.fit(raw.take(tr), points[pi])
        except ConvergenceError as exc:
            raise ConvergenceError(
                f"grid point {dict(zip(fitter.param_names, points[pi]))}, fold {f}: {exc}",
                model=exc.model, **exc.details,
            ) from exc
        holdout = raw.take(te)
        return model, _rmse(holdout.target, predict(model, holdout))

    jobs = [(pi, f) for pi in range(len(points)) for f in range(k)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(task, jobs))
    else:
        results = [task(j) for j in jobs]

    errors = np.array([e for _, e in results]).reshape(len(points), k)
    mean = errors.mean(axis=1)
    se = errors.std(axis=1, ddof=1) / np.sqrt(k)
    best = _select(points, mean, se, one_se)
    models = None
    if keep_models:
        models = {(points[pi], f): m for (pi, f), (m, _) in zip(jobs, results)}
    return CVResult(fitter.param_names, points, errors, mean, se, best, k, seed, folds, models)


def cross_val_predict(
    fm: FeatureMatrix,
    groups: Mapping[str, str],
    point: Sequence[float],
    k: int = 5,
    seed: int = 0,
    fitter="elastic_net",
) -> np.ndarray:
    """Out-of-fold predictions (transformed scale) with the same grouped folds as grid_search_cv."""
    fitter = as_fitter(fitter)
    folds = grouped_kfold({cid: groups[cid] for cid in fm.rows}, k, seed)
    raw = fm.take(np.arange(len(fm.rows)))
    out = np.empty(len(fm.rows))
    for tr, te in _fold_indices(fm, folds):
        model = fitter.fit(raw.take(tr), point)
        out[te] = predict(model, raw.take(te))
    return out


def fit_final(fm: FeatureMatrix, best_point, fitter="elastic_net", cv_result: CVResult | None = None) -> LinearModel:
    """Refit on all training data at ``best_point``, recording CV provenance."""
    fitter = as_fitter(fitter)
    if isinstance(best_point, CVResult):
        cv_result, best_point = best_point, best_point.best_point
    model = fitter.fit(fm.take(np.arange(len(fm.rows))), tuple(best_point))
    info = dict(model.fit_info)
    info["hyperparameters"] = dict(zip(fitter.param_names, (float(v) for v in best_point)))
    if cv_result is not None:
        info["cv"] = {
            "k": cv_result.k,
            "seed": cv_result.seed,
            "param_names": list(cv_result.param_names),
            "grid": [list(pt) for pt in cv_result.grid],
            "mean_rmse": cv_result.mean_error.tolist(),
            "fold_rmse": cv_result.fold_errors.tolist(),
        }
    return replace(model, fit_info=info)

"""Delta-Q feature engineering and the assembled feature matrix.

The central object is the capacity-difference curve between two cycles,
``Q_a(V) - Q_b(V)``, resampled on a common voltage grid (cycles 100 and 10 by
default).  Scalar features reduce it (variance, minimum, mean) and pass the
result through a transform; raw mode keeps one column per grid voltage,
which is what the fused lasso consumes.

Transforms take ``|x|`` before log/sqrt because delta-Q reductions are
typically negative.  The variance reduction uses the population (1/n)
convention.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .dataset import CellRecord, CycleCurve, CycleLifeLabel, Dataset
from .errors import (
    ConfigError,
    ConstantColumnError,
    CoverageError,
    DataError,
    FeatureDomainError,
    MissingCycleError,
)

COVERAGE_TOL_V = 1e-3

REDUCTIONS = ("variance", "minimum", "mean", "raw")
TRANSFORMS = ("log10_abs", "sqrt_abs", "reciprocal", "identity")
TARGET_TRANSFORMS = ("log10", "identity")


@dataclass(frozen=True)
class VoltageGrid:
    v_high: float = 3.5
    v_low: float = 2.0
    n_points: int = 1000

    def __post_init__(self):
        if not self.v_high > self.v_low:
            raise ConfigError(f"grid v_high ({self.v_high}) must exceed v_low ({self.v_low})", field="grid")
        if int(self.n_points) != self.n_points or self.n_points < 2:
            raise ConfigError(f"grid n_points must be an integer >= 2, got {self.n_points}", field="grid")

    @property
    def voltages(self) -> np.ndarray:
        """Uniformly spaced grid voltages ordered high to low."""
        return np.linspace(self.v_high, self.v_low, int(self.n_points))


@dataclass(frozen=True)
class DeltaQ:
    cell_id: str
    values: np.ndarray
    grid: VoltageGrid
    cycle_a: int
    cycle_b: int


@dataclass(frozen=True)
class Scaling:
    """Per-column training statistics used for standardization."""

    mean: np.ndarray
    std: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Scaling):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)

    def apply(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.mean) / self.std

    def invert(self, scaled: np.ndarray) -> np.ndarray:
        return scaled * self.std + self.mean


@dataclass(frozen=True)
class FeatureMatrix:
    """n x p predictors with row/column labels, target, and optional scaling.

    When ``scaling`` is set, ``values`` hold scaled columns; the raw values
    are ``scaling.invert(values)``.  ``target`` is the transformed cycle life
    (see ``target_transform``).
    """

    rows: list[str]
    columns: list[str]
    values: np.ndarray
    target: np.ndarray
    scaling: Scaling | None = None
    target_transform: str = "log10"
    voltages: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(len(self.rows), -1)
        target = np.asarray(self.target, dtype=float).reshape(-1)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "rows", list(self.rows))
        object.__setattr__(self, "columns", list(self.columns))
        n, p = values.shape
        if len(self.rows) != n or target.size != n:
            raise DataError(f"feature matrix has {n} rows but {len(self.rows)} row ids and {target.size} targets")
        if len(self.columns) != p:
            raise DataError(f"feature matrix has {p} columns but {len(self.columns)} names")
        if len(set(self.columns)) != p:
            raise DataError("feature column names must be unique")
        if self.target_transform not in TARGET_TRANSFORMS:
            raise ConfigError(f"unknown target transform {self.target_transform!r}", field="target_transform")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def raw_values(self) -> np.ndarray:
        return self.values if self.scaling is None else self.scaling.invert(self.values)

    def take(self, idx) -> "FeatureMatrix":
        """Row subset; the result is unscaled (raw) so it can be re-standardized."""
        idx = np.asarray(idx, dtype=int)
        return replace(
            self,
            rows=[self.rows[i] for i in idx],
            values=self.raw_values()[idx],
            target=self.target[idx],
            scaling=None,
        )

    def with_target(self, target) -> "FeatureMatrix":
        return replace(self, target=np.asarray(target, dtype=float))

    def inverse_target(self, y) -> np.ndarray:
        return inverse_target_transform(y, self.target_transform)


# ---------------------------------------------------------------------------
# Delta-Q
# ---------------------------------------------------------------------------

def interp_q_on_grid(curve: CycleCurve, grid: VoltageGrid, cell_id: str = "?") -> np.ndarray:
    """Piecewise-linear Q(V) evaluated on the grid (ordered high to low).

    Grid points up to 1 mV outside the curve's voltage range are clamped to
    the nearest endpoint; anything further raises CoverageError.
    """
    v = curve.voltage
    q = curve.discharge_capacity
    v_max, v_min = float(np.max(v)), float(np.min(v))
    if grid.v_high > v_max + COVERAGE_TOL_V or grid.v_low < v_min - COVERAGE_TOL_V:
        raise CoverageError(
            f"cell {cell_id} cycle {curve.cycle_number}: curve covers [{v_min:g}, {v_max:g}] V "
            f"but grid needs [{grid.v_low:g}, {grid.v_high:g}] V"
        )
    if v[0] > v[-1]:
        v, q = v[::-1], q[::-1]
    return np.interp(grid.voltages, v, q)


def delta_q(cell: CellRecord, grid: VoltageGrid, cycle_a: int = 100, cycle_b: int = 10) -> DeltaQ:
    for c in (cycle_a, cycle_b):
        if c not in cell.cycles:
            raise MissingCycleError(f"cell {cell.cell_id} has no discharge curve for cycle {c}")
    qa = interp_q_on_grid(cell.cycles[cycle_a], grid, cell.cell_id)
    qb = interp_q_on_grid(cell.cycles[cycle_b], grid, cell.cell_id)
    values = qa - qb
    if not np.all(np.isfinite(values)):
        raise DataError(f"cell {cell.cell_id}: non-finite delta-Q values")
    return DeltaQ(cell.cell_id, values, grid, cycle_a, cycle_b)


def scalar_feature(dq: DeltaQ | Sequence[float], kind: str) -> float:
    values = np.asarray(dq.values if isinstance(dq, DeltaQ) else dq, dtype=float)
    if values.size == 0:
        raise DataError("cannot reduce an empty delta-Q vector")
    if kind == "variance":
        return float(np.var(values))
    if kind == "minimum":
        return float(np.min(values))
    if kind == "mean":
        return float(np.mean(values))
    raise ConfigError(f"unknown reduction {kind!r}; expected variance, minimum or mean", field="reduction")


def transform_feature(x: float, kind: str, name: str = "feature") -> float:
    if kind == "identity":
        return float(x)
    if kind == "sqrt_abs":
        return math.sqrt(abs(x))
    if kind == "log10_abs":
        if x == 0:
            raise FeatureDomainError(f"{name}: log10_abs undefined at 0")
        return math.log10(abs(x))
    if kind == "reciprocal":
        if x == 0:
            raise FeatureDomainError(f"{name}: reciprocal undefined at 0")
        return 1.0 / x
    raise ConfigError(f"unknown transform {kind!r}", field="transform")


def target_transform(life, kind: str = "log10") -> np.ndarray:
    life = np.asarray(life, dtype=float)
    if kind == "log10":
        return np.log10(life)
    if kind == "identity":
        return life.copy()
    raise ConfigError(f"unknown target transform {kind!r}", field="target_transform")


def inverse_target_transform(y, kind: str = "log10") -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if kind == "log10":
        return 10.0 ** y
    if kind == "identity":
        return y.copy()
    raise ConfigError(f"unknown target transform {kind!r}", field="target_transform")


# ---------------------------------------------------------------------------
# Scaling and screening
# ---------------------------------------------------------------------------

def compute_scaling(raw: np.ndarray, columns: Sequence[str]) -> Scaling:
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    bad = [columns[j] for j in np.flatnonzero(~(std > 0))]
    if bad:
        raise ConstantColumnError(bad)
    return Scaling(mean, std)


def standardize(fm: FeatureMatrix) -> FeatureMatrix:
    """Z-score every column with population statistics and store them.

    Applied to an already scaled matrix it restandardizes from the raw values.
    """
    raw = fm.raw_values()
    scaling = compute_scaling(raw, fm.columns)
    return replace(fm, values=scaling.apply(raw), scaling=scaling)


def apply_scaling(fm: FeatureMatrix, scaling: Scaling | None) -> FeatureMatrix:
    """Re-express ``fm`` under ``scaling`` (None means raw values)."""
    if scaling is None and fm.scaling is None:
        return fm
    if scaling is not None and fm.scaling is not None and fm.scaling == scaling:
        return fm
    raw = fm.raw_values()
    values = raw if scaling is None else scaling.apply(raw)
    return replace(fm, values=values, scaling=scaling)


def pearson_correlation(feature, target) -> float:
    x = np.asarray(feature, dtype=float)
    y = np.asarray(target, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("feature and target must be 1-D and of equal length")
    if x.size < 3:
        raise DataError("pearson correlation needs at least 3 observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise DataError("pearson correlation undefined for zero-variance input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


# ---------------------------------------------------------------------------
# Declarative feature specs and matrix assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureSpec:
    """One column (or, for ``reduction='raw'``, one column per grid voltage)."""

    reduction: str = "variance"
    transform: str = "log10_abs"
    cycle_a: int = 100
    cycle_b: int = 10
    source: str = "delta_q"

    def __post_init__(self):
        if self.source != "delta_q":
            raise ConfigError(f"unknown feature source {self.source!r}", field="features.source")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"unknown reduction {self.reduction!r}", field="features.reduction")
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"unknown transform {self.transform!r}", field="features.transform")

    @property
    def dq_label(self) -> str:
        return f"dQ_{self.cycle_a}-{self.cycle_b}"

    @property
    def name(self) -> str:
        inner = f"{self.reduction}({self.dq_label})"
        return inner if self.transform == "identity" else f"{self.transform}({inner})"

    def column_names(self, grid: VoltageGrid) -> list[str]:
        if self.reduction != "raw":
            return [self.name]
        prefix = self.dq_label if self.transform == "identity" else f"{self.transform}({self.dq_label})"
        names = [f"{prefix}@{v:.4f}" for v in grid.voltages]
        if len(set(names)) < len(names):
            names = [f"{prefix}@{v:.4f}#{j}" for j, v in enumerate(grid.voltages)]
        return names

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "cycle_a": self.cycle_a,
            "cycle_b": self.cycle_b,
            "reduction": self.reduction,
            "transform": self.transform,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSpec":
        unknown = set(d) - {"source", "cycle_a", "cycle_b", "reduction", "transform"}
        if unknown:
            raise ConfigError(f"unknown feature spec key(s): {', '.join(sorted(unknown))}", field="features")
        return cls(**d)


def _cell_features(cell: CellRecord, specs: Sequence[FeatureSpec], grid: VoltageGrid) -> list[float]:
    cache: dict[tuple[int, int], DeltaQ] = {}
    row: list[float] = []
    for spec in specs:
        key = (spec.cycle_a, spec.cycle_b)
        if key not in cache:
            cache[key] = delta_q(cell, grid, spec.cycle_a, spec.cycle_b)
        dq = cache[key]
        if spec.reduction == "raw":
            names = spec.column_names(grid)
            row.extend(
                transform_feature(x, spec.transform, f"cell {cell.cell_id} {nm}")
                for x, nm in zip(dq.values, names)
            )
        else:
            x = scalar_feature(dq, spec.reduction)
            row.append(transform_feature(x, spec.transform, f"cell {cell.cell_id} {spec.name}"))
    return row


def assemble_feature_matrix(
    dataset: Dataset,
    labels: Mapping[str, CycleLifeLabel],
    specs: Sequence[FeatureSpec],
    grid: VoltageGrid | None = None,
    target_transform_kind: str = "log10",
    include_censored: bool = False,
) -> FeatureMatrix:
    """Build the (unscaled) feature matrix for every labelled cell, rows sorted by cell_id."""
    grid = grid or VoltageGrid()
    if not specs:
        raise ConfigError("at least one feature spec is required", field="features")
    columns: list[str] = []
    for spec in specs:
        columns.extend(spec.column_names(grid))
    rows, values, life = [], [], []
    for cell in dataset:
        label = labels.get(cell.cell_id)
        if label is None or (label.censored and not include_censored):
            continue
        try:
            values.append(_cell_features(cell, specs, grid))
        except DataError as exc:
            raise type(exc)(f"while featurizing cell {cell.cell_id}: {exc}") from exc
        rows.append(cell.cell_id)
        life.append(label.cycle_life)
    if not rows:
        raise DataError("no labelled, uncensored cells to featurize")
    raw_only = len(specs) == 1 and specs[0].reduction == "raw"
    return FeatureMatrix(
        rows=rows,
        columns=columns,
        values=np.array(values, dtype=float).reshape(len(rows), len(columns)),
        target=target_transform(life, target_transform_kind),
        target_transform=target_transform_kind,
        voltages=grid.voltages if raw_only else None,
    )


def delta_q_matrix(dataset: Dataset, grid: VoltageGrid, cycle_a: int = 100, cycle_b: int = 10):
    """Stack delta-Q rows for every cell: returns (cell_ids, n_cells x n_points array)."""
    ids, rows = [], []
    for cell in dataset:
        ids.append(cell.cell_id)
        rows.append(delta_q(cell, grid, cycle_a, cycle_b).values)
    return ids, np.vstack(rows)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def write_feature_matrix(fm: FeatureMatrix, path) -> None:
    """CSV with header ``cell_id,<features...>,target`` holding raw (unscaled) values."""
    raw = fm.raw_values()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", *fm.columns, "target"])
        for cid, row, y in zip(fm.rows, raw, fm.target):
            w.writerow([cid, *(repr(float(x)) for x in row), repr(float(y))])


def read_feature_matrix(path, target_transform_kind: str = "log10") -> FeatureMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "cell_id" or header[-1] != "target":
            raise DataError(f"{path}: header must be cell_id,<features...>,target")
        rows, values, target = [], [], []
        for line in reader:
            if not line:
                continue
            rows.append(line[0])
            values.append([float(x) for x in line[1:-1]])
            target.append(float(line[-1]))
    return FeatureMatrix(rows, header[1:-1], np.array(values, dtype=float).reshape(len(rows), -1),
                         np.array(target), target_transform=target_transform_kind)


def write_delta_q(ids: Sequence[str], dq: np.ndarray, grid: VoltageGrid, path) -> None:
    """One row per cell, columns labelled by grid voltage to 4 decimals."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", *(f"{v:.4f}" for v in grid.voltages)])
        for cid, row in zip(ids, dq):
            w.writerow([cid, *(repr(float(x)) for x in row)])

"""LinearModel, prediction, model documents and ordinary least squares."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from ..errors import ConfigError, IdentifiabilityError, SchemaError
from ..features import FeatureMatrix, Scaling, apply_scaling, inverse_target_transform, standardize

RANK_RTOL = 1e-10
MODEL_FORMAT = "cyclelife.linear_model/1"


@dataclass(frozen=True)
class ENConfig:
    lam: float
    alpha: float = 1.0
    tolerance: float = 1e-8
    max_sweeps: int = 100_000

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError(f"elastic net lambda must be >= 0, got {self.lam}", field="lambda")
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"elastic net alpha must lie in [0, 1], got {self.alpha}", field="alpha")
        if not self.tolerance > 0:
            raise ConfigError("tolerance must be positive", field="tolerance")
        if self.max_sweeps < 1:
            raise ConfigError("max_sweeps must be >= 1", field="max_sweeps")

    def to_dict(self) -> dict:
        return {"kind": "elastic_net", **asdict(self)}


@dataclass(frozen=True)
class FusedLassoConfig:
    lam1: float
    lam2: float
    admm_rho: float = 1.0
    tolerance: float = 1e-8
    max_iters: int = 50_000
    adaptive_rho: bool = True

    def __post_init__(self):
        if not self.lam1 >= 0 or not self.lam2 >= 0:
            raise ConfigError("fused lasso lambdas must be >= 0", field="lambda1/lambda2")
        if not self.admm_rho > 0:
            raise ConfigError("admm_rho must be positive", field="admm_rho")
        if not self.tolerance > 0:
            raise ConfigError("tolerance must be positive", field="tolerance")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1", field="max_iters")

    def to_dict(self) -> dict:
        return {"kind": "fused_lasso", **asdict(self)}


def config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "elastic_net":
        return ENConfig(**d)
    if kind == "fused_lasso":
        return FusedLassoConfig(**d)
    if kind == "ols":
        return None
    raise ConfigError(f"unknown fit kind {kind!r}", field="kind")


@dataclass(frozen=True)
class LinearModel:
    """Fitted linear predictor ``intercept + X_scaled @ coefficients``.

    Coefficients live on the scale of the training design (standardized
    columns when ``scaling`` is set).  ``raw_coefficients`` maps them back
    to the original feature units.
    """

    coefficients: np.ndarray
    intercept: float
    feature_names: list[str]
    scaling: Scaling | None = None
    target_transform: str = "log10"
    fit_config: dict = field(default_factory=dict)
    fit_info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        coef = np.array(self.coefficients, dtype=float).reshape(-1)
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "feature_names", list(self.feature_names))
        if coef.size != len(self.feature_names):
            raise SchemaError(f"{coef.size} coefficients for {len(self.feature_names)} feature names")
        if not (np.all(np.isfinite(coef)) and np.isfinite(self.intercept)):
            raise SchemaError("model coefficients must be finite")

    def raw_coefficients(self) -> tuple[np.ndarray, float]:
        """(slopes, intercept) expressed in unscaled feature units."""
        if self.scaling is None:
            return self.coefficients.copy(), self.intercept
        slopes = self.coefficients / self.scaling.std
        return slopes, float(self.intercept - slopes @ self.scaling.mean)

    @property
    def kind(self) -> str:
        return self.fit_config.get("kind", "ols")


def design_for(model: LinearModel, fm: FeatureMatrix) -> np.ndarray:
    """Feature values of ``fm`` expressed on the model's training scale."""
    if list(fm.columns) != model.feature_names:
        missing = [c for c in model.feature_names if c not in fm.columns]
        extra = [c for c in fm.columns if c not in model.feature_names]
        parts = []
        if missing:
            parts.append("missing: " + ", ".join(missing[:10]))
        if extra:
            parts.append("unexpected: " + ", ".join(extra[:10]))
        if not parts:
            parts.append("columns out of order")
        raise SchemaError("feature columns do not match model (" + "; ".join(parts) + ")")
    return apply_scaling(fm, model.scaling).values


def predict(model: LinearModel, fm: FeatureMatrix, inverse_transform: bool = False) -> np.ndarray:
    """Predictions on the transformed target scale, or in cycles with ``inverse_transform``."""
    y = model.intercept + design_for(model, fm) @ model.coefficients
    if inverse_transform:
        y = inverse_target_transform(y, model.target_transform)
    return y


def ensure_standardized(fm: FeatureMatrix) -> FeatureMatrix:
    """Standardize with the matrix's own statistics unless it already carries scaling."""
    return fm if fm.scaling is not None else standardize(fm)


def en_objective(X, y, coef, intercept, lam, alpha) -> float:
    r = y - intercept - X @ coef
    return float(r @ r + lam * ((1 - alpha) / 2 * coef @ coef + alpha * np.abs(coef).sum()))


def fused_objective(X, y, coef, intercept, lam1, lam2) -> float:
    r = y - intercept - X @ coef
    return float(r @ r + lam1 * np.abs(coef).sum() + lam2 * np.abs(np.diff(coef)).sum())


# ---------------------------------------------------------------------------
# OLS
# ---------------------------------------------------------------------------

def fit_ols(fm: FeatureMatrix) -> LinearModel:
    """Least squares with an intercept, on ``fm`` as given (scaled or raw).

    Rank is checked with a column-pivoted QR of ``[1, X]``; any pivot below
    ``1e-10`` of the leading one marks a dependent column.
    """
    X, y = fm.values, fm.target
    n, p = X.shape
    A = np.column_stack([np.ones(n), X])
    names = ["intercept", *fm.columns]
    Q, R, piv = linalg.qr(A, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > RANK_RTOL * d[0])) if d[0] > 0 else 0
    if rank < p + 1:
        raise IdentifiabilityError([names[j] for j in piv[rank:]], rank=rank, n_columns=p + 1)
    z = linalg.solve_triangular(R, Q.T @ y)
    beta = np.empty(p + 1)
    beta[piv] = z
    return LinearModel(
        coefficients=beta[1:],
        intercept=beta[0],
        feature_names=fm.columns,
        scaling=fm.scaling,
        target_transform=fm.target_transform,
        fit_config={"kind": "ols"},
    )


# ---------------------------------------------------------------------------
# Model documents
# ---------------------------------------------------------------------------

def _floats(a) -> list[float]:
    return [float(x) for x in np.asarray(a).reshape(-1)]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def model_to_dict(model: LinearModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "kind": model.kind,
        "feature_names": model.feature_names,
        "coefficients": _floats(model.coefficients),
        "intercept": float(model.intercept),
        "scaling": None if model.scaling is None else {
            "mean": _floats(model.scaling.mean),
            "std": _floats(model.scaling.std),
        },
        "target_transform": model.target_transform,
        "fit_config": _jsonable(model.fit_config),
        "fit_info": _jsonable(model.fit_info),
    }


def model_from_dict(d: dict) -> LinearModel:
    if d.get("format") != MODEL_FORMAT:
        raise SchemaError(f"unsupported model document format {d.get('format')!r}")
    sc = d.get("scaling")
    return LinearModel(
        coefficients=np.array(d["coefficients"], dtype=float),
        intercept=d["intercept"],
        feature_names=d["feature_names"],
        scaling=None if sc is None else Scaling(np.array(sc["mean"], dtype=float), np.array(sc["std"], dtype=float)),
        target_transform=d["target_transform"],
        fit_config=d.get("fit_config", {}),
        fit_info=d.get("fit_info", {}),
    )


def dumps_model(model: LinearModel) -> str:
    # json writes floats with repr, the shortest form that round-trips bit-exactly
    return json.dumps(model_to_dict(model), indent=2, allow_nan=False) + "\n"


def loads_model(text: str) -> LinearModel:
    return model_from_dict(json.loads(text))


def save_model(model: LinearModel, path) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path) -> LinearModel:
    return loads_model(Path(path).read_text())

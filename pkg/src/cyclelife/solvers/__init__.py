"""Regularized linear estimation: OLS, elastic net, fused lasso."""

from .elastic_net import elastic_net_path, fit_elastic_net, lambda_max
from .fused_lasso import count_pieces, fit_fused_lasso
from .kkt import kkt_residual
from .linear import (
    ENConfig,
    FusedLassoConfig,
    LinearModel,
    config_from_dict,
    dumps_model,
    en_objective,
    ensure_standardized,
    fit_ols,
    fused_objective,
    load_model,
    loads_model,
    predict,
    save_model,
)
from .prox import fused_prox, soft_threshold, tv_prox_1d

__all__ = [
    "ENConfig",
    "FusedLassoConfig",
    "LinearModel",
    "config_from_dict",
    "count_pieces",
    "dumps_model",
    "elastic_net_path",
    "en_objective",
    "ensure_standardized",
    "fit_elastic_net",
    "fit_fused_lasso",
    "fit_ols",
    "fused_objective",
    "fused_prox",
    "kkt_residual",
    "lambda_max",
    "load_model",
    "loads_model",
    "predict",
    "save_model",
    "soft_threshold",
    "tv_prox_1d",
]

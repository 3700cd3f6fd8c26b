"""Causal demand forecasting workbench.

A synthetic confounded-pricing simulator with exact counterfactual ground
truth, a cross-fitted DML demand forecaster with elasticity and linear effect
heads plus its ablation variants, econometric and naive baselines, and an
on-/off-policy evaluation protocol.
"""

__version__ = "0.1.0"

from .dml import (
    DmlModel,
    ForecastRequest,
    ModelConfig,
    TfModel,
    effect_estimates,
    effect_head_elastic,
    effect_head_linear,
    ensemble_demand,
    fit_dml,
    fit_forecaster,
    fit_no_crossfit_variant,
    fit_sample_split_variant,
    fit_sdml,
    fit_tf_baseline,
    load_model,
    predict,
    residualized_theta,
    save_model,
    slearner_theta,
    split_even_odd,
)
from .econ import (
    ElasticityFit,
    elasticity_demand,
    implied_elasticity,
    naive_forecasts,
    twfe_forecast,
    twfe_poisson_fit,
)
from .evaluate import (
    EvalReport,
    ModelSpec,
    ProtocolConfig,
    demand_error,
    effect_error,
    holdout_replacement,
    mae,
    mse,
    run_protocol,
)
from .features import FeatureSpec, build_features
from .nnet import Dataset, Network, NetworkSpec, TrainConfig, gradient_check, train
from .panel import ArticleStatic, Panel, SeriesPoint, load_panel
from .sim import (
    SimConfig,
    base_demand,
    counterfactual_demand,
    counterfactual_matrix,
    demand,
    sample_article,
    simulate_policy,
    stock_coverage,
    update_discount_step,
)

__all__ = [name for name in dir() if not name.startswith("_")]

"""Extreme quantile regression with forest-localized generalized Pareto tails."""

from .forest import (
    Forest,
    ForestParams,
    TrainingSet,
    Tree,
    best_split,
    fit_forest,
    relabel_split_labels,
    similarity_weights,
    weighted_quantile,
)
from .gpd import (
    ExceedanceSample,
    GpdParams,
    NoExceedanceError,
    PenaltyConfig,
    ThetaBox,
    fn_gn_eval,
    gpd_cdf,
    gpd_deviance,
    gpd_quantile,
    grimshaw_fit,
    penalized_fit,
    unconditional_fit,
    weighted_nll,
)
from .model import (
    ErfModel,
    QuantilePrediction,
    erf_fit,
    exp_shape_estimate,
    hill_estimate,
    predict_extreme_quantile,
    predict_gpd_params,
    weissman_quantile,
)
from .cv import CvPlan, CvResult, cv_score, make_folds, tune
from .simbench import (
    EvalReport,
    SimSpec,
    generate,
    halton_grid,
    ise,
    mise_bias_variance,
    run_experiment,
    true_quantile,
    wang_loss,
)
from .archive import load_model, save_model

__version__ = "0.1.0"

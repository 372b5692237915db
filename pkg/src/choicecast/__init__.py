"""Estimation and prediction with logit-family discrete choice models."""
from .data import ChoiceDataset, DataError, DataSchema, SplitDataset, load_dataset, split_dataset, write_dataset
from .dgp import DgpSpec, Truth, oracle_choice_probs, simulate_dataset
from .estimation import (
    EstimateOptions,
    EstimationResult,
    adjusted_rho2,
    bic,
    covariance,
    fit_stats,
    gradient,
    lr_test,
    maximize_ll,
)
from .evaluation import assemble_report, avg_chosen_probability, rmse_shares, tpr
from .kernels import ModelError, mnl_probs, nl_probs, utilities
from .likelihood import Engine, NumericalError, ll_lc, ll_mixed, ll_plain
from .mixing import MixingSpec, mlhs_draws, transform_draw
from .model import ModelSpec, ParameterVector, compile_model
from .prediction import (
    PredictionRequest,
    PredictionTable,
    posterior_class_probs,
    posterior_draw_weights,
    predict_case,
    predict_lc_conditional,
    predict_lc_unconditional,
    predict_mixed_conditional,
    predict_mixed_unconditional,
    predict_plain,
)

__version__ = "0.1.0"

__all__ = [
    "ChoiceDataset",
    "DataError",
    "DataSchema",
    "SplitDataset",
    "load_dataset",
    "split_dataset",
    "write_dataset",
    "DgpSpec",
    "Truth",
    "oracle_choice_probs",
    "simulate_dataset",
    "EstimateOptions",
    "EstimationResult",
    "adjusted_rho2",
    "bic",
    "covariance",
    "fit_stats",
    "gradient",
    "lr_test",
    "maximize_ll",
    "assemble_report",
    "avg_chosen_probability",
    "rmse_shares",
    "tpr",
    "ModelError",
    "mnl_probs",
    "nl_probs",
    "utilities",
    "Engine",
    "NumericalError",
    "ll_lc",
    "ll_mixed",
    "ll_plain",
    "MixingSpec",
    "mlhs_draws",
    "transform_draw",
    "ModelSpec",
    "ParameterVector",
    "compile_model",
    "PredictionRequest",
    "PredictionTable",
    "posterior_class_probs",
    "posterior_draw_weights",
    "predict_case",
    "predict_lc_conditional",
    "predict_lc_unconditional",
    "predict_mixed_conditional",
    "predict_mixed_unconditional",
    "predict_plain",
]

"""Plug-in prediction of domain characteristics with mixed models and gradient boosting."""

from .accuracy import AccuracyReport, ErrorSample, accuracy_report, double_bootstrap, parametric_bootstrap, residual_bootstrap
from .frame import LongFrame, draw_panel_sample, load_frame, subset_mask
from .gbt import GbHyperparams, GbModel, fit_gb, fit_tree, predict_gb
from .lmm import LmmFit, LmmParams, blup_effects, fit_reml
from .predictor import ModelSetup, PlugInProblem, ThetaSpec, characteristic, compose_population, plug_in_predict
from .simulation import McConfig, ScenarioSpec, calibrate_params, generate_scenario, mc_accuracy_estimators, mc_predictors

__version__ = "0.1.0"

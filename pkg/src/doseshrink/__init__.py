"""Bayesian sigmoid Emax dose-response models with shrinkage priors on covariate effects."""
__version__ = "0.1.0"

from .backend import BACKEND, get_backend
from .calibration import CalibrationSpec, calibrate_eta, guesstimate_thresholds
from .data import ColumnSchema, DataError, TrialDataset, build_dataset, load_dataset
from .emax import DoseResponseParams, emax_mean, hill_fraction, prefit
from .mcmc import MCMCConfig, PosteriorSamples, SamplerError, run_chains
from .priors import PriorSpec, sample_prior
from .simulation import ScenarioSpec, generate_trial, rmse_treatment_effects, run_study
from .subgroup import hpd_interval, identify_subgroup, select_predictive, treatment_effect_draws

__all__ = [
    "BACKEND", "get_backend", "CalibrationSpec", "calibrate_eta", "guesstimate_thresholds",
    "ColumnSchema", "DataError", "TrialDataset", "build_dataset", "load_dataset",
    "DoseResponseParams", "emax_mean", "hill_fraction", "prefit", "MCMCConfig", "PosteriorSamples",
    "SamplerError", "run_chains", "PriorSpec", "sample_prior", "ScenarioSpec", "generate_trial",
    "rmse_treatment_effects", "run_study", "hpd_interval", "identify_subgroup", "select_predictive",
    "treatment_effect_draws",
]

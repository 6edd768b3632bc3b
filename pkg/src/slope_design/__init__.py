"""Penalty design for SLOPE: sorted-L1 prox, solvers, AMP and penalty search."""

from .amp import (
    AmpConfig,
    CalibrationError,
    DegenerateTauError,
    Prior,
    asymptotic_mse,
    calibrate_alpha_to_lambda,
    calibrate_lambda_to_alpha,
    mmse_denoiser,
    mmse_state_evolution,
    run_mmse_amp,
    run_slope_amp,
    state_evolution_tau,
)
from .data import (
    ExperimentSpec,
    estimation_mse,
    gen_arma_design,
    gen_gaussian_design,
    kfold_cv,
    load_csv,
    make_dataset,
    prediction_mse,
)
from .design import (
    KLevelPenalty,
    PGDConfig,
    SearchConfig,
    bh_sequence,
    cd_design,
    compute_D,
    gradient_tau_alpha,
    pgd_design,
    project_on_S,
)
from .solver import Dataset, SolverConfig, fit_slope, fit_slope_logistic, slope_objective
from .sorted_l1 import modified_l0, prox_sorted_l1, sorted_l1_norm, tie_structure

__all__ = [
    "AmpConfig", "CalibrationError", "DegenerateTauError", "Prior", "asymptotic_mse",
    "calibrate_alpha_to_lambda", "calibrate_lambda_to_alpha", "mmse_denoiser",
    "mmse_state_evolution", "run_mmse_amp", "run_slope_amp", "state_evolution_tau",
    "ExperimentSpec", "estimation_mse", "gen_arma_design", "gen_gaussian_design", "kfold_cv",
    "load_csv", "make_dataset", "prediction_mse", "KLevelPenalty", "PGDConfig", "SearchConfig",
    "bh_sequence", "cd_design", "compute_D", "gradient_tau_alpha", "pgd_design", "project_on_S",
    "Dataset", "SolverConfig", "fit_slope", "fit_slope_logistic", "slope_objective",
    "modified_l0", "prox_sorted_l1", "sorted_l1_norm", "tie_structure",
]

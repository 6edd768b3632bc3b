"""Experiment pipelines: Lasso baselines, k-level sweeps and AMP comparisons."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import amp
from .amp import DegenerateTauError
from .data import kfold_cv
from .design import (
    KLevelPenalty,
    PGDConfig,
    SearchConfig,
    cd_design,
    lasso_grid_search,
    pgd_design,
)
from .solver import SolverConfig


def lambda_max(dataset):
    """Smallest constant penalty giving the all-zero SLOPE (and Lasso) solution."""
    return float(np.max(np.abs(dataset.X.T @ dataset.y)))


def lasso_lambda_grid(dataset, n_grid=40, lo_frac=1e-3):
    """Geometric grid of constant penalties from ``lo_frac * lambda_max`` to ``lambda_max``."""
    top = lambda_max(dataset)
    if top <= 0:
        raise ValueError("X^T y is zero: every penalty gives the zero solution")
    return np.geomspace(lo_frac * top, top, n_grid)


def cv_objective(dataset, folds=10, task="linear", seed=0, config=None, warm_start=False):
    """Penalty -> cross-validated loss (prediction MSE, or 1 - accuracy for logistic).

    Values are memoized by penalty.  With ``warm_start`` each fit starts from
    the previous call's solution, which is faster but makes values at barely
    converged (tiny) penalties depend on the evaluation order; the default
    cold start keeps the objective a pure function of the penalty.
    """
    config = config or SolverConfig(max_iters=20000, rel_tolerance=1e-9)
    cache = {} if warm_start else None
    memo = {}

    def objective(lam):
        lam = np.asarray(lam, dtype=float)
        key = lam.tobytes()
        if key not in memo:
            res = kfold_cv(dataset, folds, lam, task=task, seed=seed, config=config,
                           warm_start=cache)
            memo[key] = res.mean if task == "linear" else 1.0 - res.mean
        return memo[key]

    return objective


def se_objective(prior, cfg):
    """Threshold sequence -> asymptotic MSE ``delta (tau^2 - sigma_w^2)`` (nan if undefined).

    State evolution is warm-started from the last converged ``tau``.
    """
    last = [None]

    def objective(alpha):
        try:
            se = amp._state_evolution(alpha, prior, cfg, last[0])
        except DegenerateTauError:
            return math.nan
        if not se.converged:
            return math.nan
        last[0] = se.tau
        return amp.asymptotic_mse(se.tau, cfg)

    return objective


@dataclass
class KSweepResult:
    """Lasso grid search followed by CD for ``k = 1 .. k_max``."""

    lasso_value: float
    lasso_objective: float
    lasso_curve: list
    grid: np.ndarray
    results: dict = field(default_factory=dict)


def k_level_sweep(objective, p, grid, k_values=(1, 2), search=None):
    """Tune a constant penalty on ``grid``, then run CD for each ``k`` in turn.

    ``k = 1`` starts from the best grid value; every larger ``k`` starts from
    the previous solution with its longest block split in two, so the final
    objective can only go down as ``k`` grows.
    """
    k_values = sorted(k_values)
    if not k_values or k_values[0] < 1:
        raise ValueError("k values must be positive")
    if k_values[-1] > p:
        raise ValueError(f"k={k_values[-1]} exceeds p={p}")
    search = search or SearchConfig(upper_cap=float(np.max(grid)))
    best, best_obj, curve = lasso_grid_search(objective, p, grid)
    out = KSweepResult(best, best_obj, curve, np.asarray(grid))
    kp = KLevelPenalty((best,), (), p)
    for k in range(1, k_values[-1] + 1):
        while kp.k < k:
            kp = kp.refine()
        res = cd_design(objective, kp, search)
        kp = res.penalty
        if k in k_values:
            out.results[k] = res
    return out


def lasso_alpha_grid(n_grid=40, lo=0.05, hi=10.0):
    return np.geomspace(lo, hi, n_grid)


def design_amp_thresholds(prior, cfg, k_values=(2,), pgd=None, search=None, with_pgd=True):
    """Design thresholds once on the state-evolution objective.

    Returns a dict with ``"lasso"``, ``"slope-k{k}"`` for every ``k`` and
    ``"slope-pgd"`` (when ``with_pgd``), each mapped to a threshold vector, plus
    the predicted asymptotic MSE of each.
    """
    objective = se_objective(prior, cfg)
    sweep = k_level_sweep(
        objective, cfg.p, lasso_alpha_grid(), k_values=k_values,
        search=search or SearchConfig(upper_cap=10.0),
    )
    alphas = {"lasso": np.full(cfg.p, sweep.lasso_value)}
    predicted = {"lasso": sweep.lasso_objective}
    for k, res in sweep.results.items():
        alphas[f"slope-k{k}"] = res.penalty.expand()
        predicted[f"slope-k{k}"] = res.objective
    if with_pgd:
        res = pgd_design(prior, cfg, pgd or PGDConfig())
        alphas["slope-pgd"] = res.alpha
        predicted["slope-pgd"] = amp.asymptotic_mse(res.tau, cfg)
    return alphas, predicted


def run_amp_comparison(dataset, alphas, prior, cfg, iters=100, with_mmse=True):
    """Run SLOPE AMP for every threshold vector (and MMSE AMP) on ``dataset``."""
    trajectories = {}
    for name, alpha in alphas.items():
        trajectories[name] = amp.run_slope_amp(dataset, alpha, iters=iters)
    if with_mmse:
        trajectories["mmse"] = amp.run_mmse_amp(dataset, prior, iters=iters, cfg=cfg)
    return trajectories

"""Proximal-gradient solvers for SLOPE with squared and logistic loss."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .sorted_l1 import as_penalty, prox_sorted_l1, sorted_l1_norm


@dataclass
class Dataset:
    """Design matrix, response and optional ground truth.

    For logistic tasks ``y`` holds {0, 1} labels.
    """

    X: np.ndarray
    y: np.ndarray
    beta_true: np.ndarray | None = None
    sigma_w: float | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.X.ndim != 2:
            raise ValueError("X must be a 2-d array")
        if self.X.shape[0] != self.y.size:
            raise ValueError(f"X has {self.X.shape[0]} rows but y has length {self.y.size}")
        if self.beta_true is not None:
            self.beta_true = np.asarray(self.beta_true, dtype=float).ravel()
            if self.beta_true.size != self.X.shape[1]:
                raise ValueError("beta_true length must equal the number of columns of X")
        if self.sigma_w is not None and self.sigma_w < 0:
            raise ValueError("sigma_w must be non-negative")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    def subset(self, rows):
        return Dataset(self.X[rows], self.y[rows], self.beta_true, self.sigma_w)


@dataclass
class SolverConfig:
    """Settings for :func:`fit_slope` and :func:`fit_slope_logistic`.

    ``step`` fixes the step size; when ``None`` the solver backtracks from
    ``1 / ||X||_op^2`` (power-iteration estimate) shrinking by ``shrink``.
    """

    max_iters: int = 5000
    rel_tolerance: float = 1e-10
    residual_tolerance: float = 1e-8
    step: float | None = None
    shrink: float = 0.5
    acceleration: str = "fista"
    intercept: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rel_tolerance <= 0 or self.residual_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.step is not None and self.step <= 0:
            raise ValueError("step must be positive")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        if self.acceleration not in ("none", "fista"):
            raise ValueError("acceleration must be 'none' or 'fista'")


@dataclass
class FitResult:
    beta: np.ndarray
    intercept: float = 0.0
    n_iter: int = 0
    converged: bool = False
    objective: list = field(default_factory=list)


def operator_norm_sq(X, n_steps=50, seed=0):
    """Estimate ``||X||_op^2`` by power iteration on ``X^T X``."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(X.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(n_steps):
        w = X.T @ (X @ v)
        est = np.linalg.norm(w)
        if est == 0:
            return 0.0
        v = w / est
    return float(est)


def _check_dims(dataset, b, lam):
    if b.size != dataset.p:
        raise ValueError(f"coefficient length {b.size} != number of columns {dataset.p}")
    if lam.size != dataset.p:
        raise ValueError(f"penalty length {lam.size} != number of columns {dataset.p}")


def slope_objective(dataset, b, lam):
    """``0.5 * ||y - X b||^2 + J_lambda(b)``."""
    b = np.asarray(b, dtype=float).ravel()
    lam = np.asarray(lam, dtype=float).ravel()
    _check_dims(dataset, b, lam)
    r = dataset.y - dataset.X @ b
    return 0.5 * float(r @ r) + sorted_l1_norm(b, lam)


def _logistic_loss(X, y, b, c):
    eta = X @ b + c
    return float(np.sum(np.logaddexp(0.0, eta) - y * eta))


def logistic_objective(dataset, b, lam, intercept=0.0):
    """Negative log-likelihood (sum over samples) plus ``J_lambda(b)``."""
    b = np.asarray(b, dtype=float).ravel()
    lam = np.asarray(lam, dtype=float).ravel()
    _check_dims(dataset, b, lam)
    return _logistic_loss(dataset.X, dataset.y, b, intercept) + sorted_l1_norm(b, lam)


def _proximal_gradient(smooth, grad, lam, b0, c0, lipschitz, config):
    """Shared ISTA/FISTA loop with backtracking.

    ``smooth(b, c)`` and ``grad(b, c) -> (gb, gc)`` describe the loss; ``c`` is
    an unpenalized intercept (kept at 0 when ``config.intercept`` is False).
    """
    fit_c = config.intercept
    if config.step is not None:
        step = config.step
        backtrack = False
    else:
        step = 1.0 / lipschitz if lipschitz > 0 else 1.0
        backtrack = True

    def total(b, c):
        return smooth(b, c) + sorted_l1_norm(b, lam)

    b, c = b0.copy(), c0
    yb, yc = b.copy(), c
    t = 1.0
    obj = total(b, c)
    history = [obj]
    converged = False
    accelerate = config.acceleration == "fista"
    it = 0
    for it in range(1, config.max_iters + 1):
        f_y = smooth(yb, yc)
        gb, gc = grad(yb, yc)
        while True:
            nb = prox_sorted_l1(yb - step * gb, step * lam)
            nc = yc - step * gc if fit_c else 0.0
            if not backtrack:
                break
            db = nb - yb
            dc = nc - yc
            quad = f_y + gb @ db + gc * dc + (db @ db + dc * dc) / (2 * step)
            if smooth(nb, nc) <= quad + 1e-12 * max(1.0, abs(f_y)):
                break
            step *= config.shrink
        new_obj = total(nb, nc)
        if accelerate:
            # adaptive restart when the objective goes up
            if new_obj > obj:
                t = 1.0
                yb, yc = b.copy(), c
                continue
            t_next = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
            yb = nb + ((t - 1) / t_next) * (nb - b)
            yc = nc + ((t - 1) / t_next) * (nc - c) if fit_c else 0.0
            t = t_next
        else:
            yb, yc = nb, nc
        change = np.sqrt(np.sum((nb - b) ** 2) + (nc - c) ** 2)
        scale = max(1.0, np.linalg.norm(nb))
        rel_obj = abs(obj - new_obj) / max(1.0, abs(new_obj))
        b, c, obj = nb, nc, new_obj
        history.append(obj)
        if change / (step * scale) < config.residual_tolerance or rel_obj < config.rel_tolerance:
            converged = True
            break
    return FitResult(beta=b, intercept=float(c), n_iter=it, converged=converged, objective=history)


def fit_slope(dataset, lam, config=None, beta0=None):
    """Fit SLOPE with squared loss by proximal gradient (ISTA or FISTA).

    Returns a :class:`FitResult`; ``converged`` is False when ``max_iters``
    ran out, in which case ``beta`` is the last iterate.
    """
    config = config or SolverConfig()
    lam = as_penalty(lam, dataset.p, "lambda")
    X, y = dataset.X, dataset.y
    b0 = np.zeros(dataset.p) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    c0 = float(np.mean(y - X @ b0)) if config.intercept else 0.0
    ones = np.ones(dataset.n)

    def smooth(b, c):
        r = y - X @ b - c
        return 0.5 * float(r @ r)

    def grad(b, c):
        r = X @ b + c - y
        return X.T @ r, (float(ones @ r) if config.intercept else 0.0)

    lip = operator_norm_sq(X) + (dataset.n if config.intercept else 0.0)
    res = _proximal_gradient(smooth, grad, lam, b0, c0, lip, config)
    if not res.converged:
        warnings.warn(f"fit_slope did not converge in {config.max_iters} iterations", RuntimeWarning)
    return res


def fit_slope_logistic(dataset, lam, config=None, beta0=None):
    """Fit SLOPE-penalized logistic regression on {0, 1} labels."""
    config = config or SolverConfig()
    lam = as_penalty(lam, dataset.p, "lambda")
    X, y = dataset.X, dataset.y
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic regression needs labels in {0, 1}")
    b0 = np.zeros(dataset.p) if beta0 is None else np.asarray(beta0, dtype=float).copy()

    def smooth(b, c):
        return _logistic_loss(X, y, b, c)

    def grad(b, c):
        prob = 0.5 * (1.0 + np.tanh(0.5 * (X @ b + c)))
        r = prob - y
        return X.T @ r, (float(r.sum()) if config.intercept else 0.0)

    lip = 0.25 * (operator_norm_sq(X) + (dataset.n if config.intercept else 0.0))
    res = _proximal_gradient(smooth, grad, lam, b0, 0.0, lip, config)
    if not np.any(lam > 0) and np.linalg.norm(res.beta) > 1e6:
        warnings.warn("coefficients diverge: the data look linearly separable", RuntimeWarning)
    if not res.converged:
        warnings.warn(
            f"fit_slope_logistic did not converge in {config.max_iters} iterations", RuntimeWarning
        )
    return res


def predict(dataset, beta, intercept=0.0):
    beta = np.asarray(beta, dtype=float).ravel()
    if beta.size != dataset.p:
        raise ValueError(f"coefficient length {beta.size} != number of columns {dataset.p}")
    return dataset.X @ beta + intercept


def predict_labels(dataset, beta, intercept=0.0):
    """Class labels ``1{x^T beta + c > 0}``."""
    return (predict(dataset, beta, intercept) > 0).astype(float)


def classification_accuracy(y, y_hat):
    y = np.asarray(y).ravel()
    y_hat = np.asarray(y_hat).ravel()
    if y.size != y_hat.size:
        raise ValueError("label vectors differ in length")
    return float(np.mean(y == y_hat))

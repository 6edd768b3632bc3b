"""Synthetic designs, signal/noise sampling, cross-validation and CSV I/O."""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .amp import Prior
from .solver import (
    Dataset,
    SolverConfig,
    classification_accuracy,
    fit_slope,
    fit_slope_logistic,
    predict,
    predict_labels,
)


def gen_gaussian_design(n, p, seed):
    """``n x p`` matrix with i.i.d. N(0, 1/n) entries."""
    if n < 1 or p < 1:
        raise ValueError("n and p must be positive")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, p)) / math.sqrt(n)


def gen_arma_design(n, p, ar=0.8, ma=0.8, seed=0, burn_in=100):
    """Rows are ARMA(1,1) paths across the features.

    ``X_t = eps_t + ar * X_{t-1} + ma * eps_{t-1}`` with ``eps_t ~ N(0, 1)``,
    started from zeros; the first ``burn_in`` steps are dropped.
    """
    if abs(ar) >= 1:
        raise ValueError("|ar| must be < 1 for a stationary ARMA(1,1)")
    if n < 1 or p < 1:
        raise ValueError("n and p must be positive")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, p + burn_in))
    X = signal.lfilter([1.0, ma], [1.0, -ar], eps, axis=1)
    return np.ascontiguousarray(X[:, burn_in:])


def arma_lag1_correlation(ar, ma):
    """Stationary lag-1 autocorrelation of ARMA(1,1)."""
    return (1 + ar * ma) * (ar + ma) / (1 + 2 * ar * ma + ma * ma)


def sample_prior(prior, p, seed):
    return prior.sample(np.random.default_rng(seed), p)


def sample_noise(sigma_w, n, seed):
    if sigma_w < 0:
        raise ValueError("sigma_w must be non-negative")
    if sigma_w == 0:
        return np.zeros(n)
    return sigma_w * np.random.default_rng(seed).standard_normal(n)


@dataclass
class ExperimentSpec:
    """A synthetic regression experiment.

    ``design`` is ``"gaussian_iid"`` (entries N(0, 1/n)) or ``"arma11"``.
    ``column_scale="unit"`` rescales every column to unit Euclidean norm,
    which puts ARMA designs on the same scale as the Gaussian one.
    """

    design: str = "gaussian_iid"
    n: int = 300
    p: int = 1000
    prior: Prior = field(default_factory=lambda: Prior.bernoulli(0.5))
    sigma_w: float = 0.0
    ar: float = 0.8
    ma: float = 0.8
    seeds: list = field(default_factory=lambda: [0])
    folds: int = 10
    metric: str = "estimation_mse"
    column_scale: str = "none"

    def __post_init__(self):
        if self.design not in ("gaussian_iid", "arma11"):
            raise ValueError("design must be 'gaussian_iid' or 'arma11'")
        if self.n < 1 or self.p < 1:
            raise ValueError("n and p must be positive")
        if self.sigma_w < 0:
            raise ValueError("sigma_w must be non-negative")
        if self.metric not in ("estimation_mse", "prediction_mse", "accuracy"):
            raise ValueError("metric must be estimation_mse, prediction_mse or accuracy")
        if self.metric != "estimation_mse" and self.folds < 2:
            raise ValueError("cross-validated metrics need folds >= 2")
        if self.column_scale not in ("none", "unit"):
            raise ValueError("column_scale must be 'none' or 'unit'")


def make_dataset(spec, seed):
    """Draw ``y = X beta + w`` for ``spec``; a pure function of ``(spec, seed)``."""
    s_x, s_beta, s_w = np.random.SeedSequence(seed).spawn(3)
    if spec.design == "gaussian_iid":
        X = gen_gaussian_design(spec.n, spec.p, s_x)
    else:
        X = gen_arma_design(spec.n, spec.p, spec.ar, spec.ma, s_x)
    if spec.column_scale == "unit":
        norms = np.linalg.norm(X, axis=0)
        X = X / np.where(norms > 0, norms, 1.0)
    beta = spec.prior.sample(np.random.default_rng(s_beta), spec.p)
    w = sample_noise(spec.sigma_w, spec.n, s_w)
    return Dataset(X, X @ beta + w, beta_true=beta, sigma_w=spec.sigma_w)


def estimation_mse(beta, beta_hat):
    """``||beta - beta_hat||^2 / p``."""
    return _mse(beta, beta_hat)


def prediction_mse(y, y_hat):
    """``||y - y_hat||^2 / n``."""
    return _mse(y, y_hat)


def _mse(u, v):
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if u.size != v.size:
        raise ValueError(f"length mismatch: {u.size} != {v.size}")
    return float(np.mean((u - v) ** 2))


@dataclass
class CvResult:
    per_fold: list
    mean: float
    std: float
    penalty: np.ndarray | None = None


def fold_indices(n, folds, seed=0):
    """Seeded permutation of ``range(n)`` cut into ``folds`` contiguous blocks."""
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if folds > n:
        raise ValueError(f"folds={folds} exceeds the number of rows n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, folds)


def kfold_cv(dataset, folds, penalty, task="linear", seed=0, config=None, warm_start=None):
    """K-fold cross-validation of SLOPE.

    Parameters
    ----------
    penalty : array_like or callable
        Fixed penalty vector, or ``tuner(train_dataset) -> penalty``.
    task : {"linear", "logistic"}
        Held-out metric is prediction MSE or classification accuracy.
    warm_start : dict, optional
        Per-fold coefficient cache reused across calls (speeds up searches).
    """
    if task not in ("linear", "logistic"):
        raise ValueError("task must be 'linear' or 'logistic'")
    config = config or SolverConfig()
    blocks = fold_indices(dataset.n, folds, seed)
    all_rows = np.arange(dataset.n)
    scores = []
    lam_used = None
    for f, test in enumerate(blocks):
        train = np.setdiff1d(all_rows, test, assume_unique=True)
        if test.size == 0 or train.size == 0:
            raise ValueError(f"fold {f} has an empty split")
        tr, te = dataset.subset(train), dataset.subset(test)
        lam = penalty(tr) if callable(penalty) else penalty
        lam_used = np.asarray(lam, dtype=float)
        beta0 = warm_start.get(f) if warm_start is not None else None
        if task == "linear":
            res = fit_slope(tr, lam, config, beta0=beta0)
            scores.append(prediction_mse(te.y, predict(te, res.beta, res.intercept)))
        else:
            res = fit_slope_logistic(tr, lam, config, beta0=beta0)
            scores.append(classification_accuracy(te.y, predict_labels(te, res.beta, res.intercept)))
        if warm_start is not None:
            warm_start[f] = res.beta
    scores = np.asarray(scores)
    return CvResult(
        per_fold=list(scores),
        mean=float(scores.mean()),
        std=float(scores.std(ddof=1)) if scores.size > 1 else 0.0,
        penalty=lam_used,
    )


def screen_features(X, y, m):
    """Indices of the ``m`` columns with largest ``|corr(X_j, y)|``, best first.

    Correlations use centered columns; ties keep column order.
    """
    p = X.shape[1]
    if m > p:
        raise ValueError(f"cannot keep {m} of {p} columns")
    Xc = X - X.mean(axis=0)
    yc = y - y.mean()
    denom = np.linalg.norm(Xc, axis=0) * np.linalg.norm(yc)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, np.abs(Xc.T @ yc) / denom, 0.0)
    return np.argsort(-corr, kind="stable")[:m]


def standardize_columns(X):
    """Center every column and scale it to unit Euclidean norm (constant columns stay 0)."""
    Xc = X - X.mean(axis=0)
    norms = np.linalg.norm(Xc, axis=0)
    return Xc / np.where(norms > 0, norms, 1.0)


def _read_numeric_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            values = []
            for col, cell in zip(header, row):
                cell = cell.strip()
                if cell == "" or cell.lower() in ("na", "nan"):
                    raise ValueError(f"{path}: row {lineno}, column {col!r}: missing value")
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}: row {lineno}, column {col!r}: non-numeric value {cell!r}"
                    ) from None
            rows.append(values)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return header, np.array(rows)


def load_csv(path, response_column, screen_top_m=None, task="linear", standardize=True):
    """Read a numeric CSV with a header row into a :class:`Dataset`.

    The response column is never a screening candidate.  With ``screen_top_m``
    only the most correlated columns are kept (in their original order).
    Features are centered and scaled to unit norm when ``standardize``; for
    ``task="linear"`` the response is centered too, for ``"logistic"`` it must
    be 0/1.

    Returns
    -------
    dataset : Dataset
    names : list of str
        Names of the kept feature columns.
    """
    header, data = _read_numeric_csv(path)
    if response_column not in header:
        raise ValueError(f"{path}: no column named {response_column!r}")
    j = header.index(response_column)
    y = data[:, j]
    feat_idx = [i for i in range(len(header)) if i != j]
    X = data[:, feat_idx]
    names = [header[i] for i in feat_idx]
    if task == "logistic":
        if not np.all((y == 0) | (y == 1)):
            raise ValueError(f"{path}: logistic labels must be 0 or 1")
    elif task != "linear":
        raise ValueError("task must be 'linear' or 'logistic'")
    if screen_top_m is not None:
        keep = np.sort(screen_features(X, y, screen_top_m))
        X = X[:, keep]
        names = [names[i] for i in keep]
    if standardize:
        X = standardize_columns(X)
        if task == "linear":
            y = y - y.mean()
    return Dataset(X, y), names


def save_dataset(dataset, path, meta=None):
    """Write ``x1..xp, y`` as CSV plus a ``key=value`` sidecar ``<path>.meta``."""
    path = Path(path)
    header = [f"x{j + 1}" for j in range(dataset.p)] + ["y"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row, yi in zip(dataset.X, dataset.y):
            w.writerow([f"{v:.9g}" for v in row] + [f"{yi:.9g}"])
    info = {"n": dataset.n, "p": dataset.p}
    info.update(meta or {})
    with open(str(path) + ".meta", "w", encoding="utf-8") as fh:
        for key, value in info.items():
            fh.write(f"{key}={value}\n")
    return path

"""Approximate message passing for SLOPE and for the Bernoulli-Gaussian MMSE denoiser.

Expectations over ``(beta, Z)`` are Monte Carlo averages over ``mc_samples``
replicates of full ``p``-vectors.  Replicate ``r`` always draws from the
``r``-th child of ``SeedSequence(seed)``, so every quantity computed with the
same ``AmpConfig`` sees the same draws (common random numbers).
"""

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .sorted_l1 import as_penalty, modified_l0, modified_l0_rows, prox_sorted_l1


# accepted jump of the Monte Carlo calibration map at the inverse
CALIBRATION_RTOL = 0.02


class CalibrationError(ValueError):
    """Raised when alpha and lambda cannot be matched by the calibration."""


class DegenerateTauError(ValueError):
    """Raised when the effective noise is identically zero."""


@dataclass(frozen=True)
class Prior:
    """Distribution of the i.i.d. signal entries.

    kind ``"bernoulli"``
        ``value`` with probability ``eps``, 0 otherwise.
    kind ``"gauss_bernoulli"``
        ``N(0, sigma_b^2)`` with probability ``eps``, 0 otherwise.
    kind ``"gaussian_binomial"``
        ``B * Z`` with ``B ~ Binomial(trials, prob)`` and ``Z ~ N(0, 1)``.
    """

    kind: str
    eps: float = 0.5
    value: float = 1.0
    sigma_b: float = 1.0
    trials: int = 5
    prob: float = 0.3

    def __post_init__(self):
        if self.kind not in ("bernoulli", "gauss_bernoulli", "gaussian_binomial"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if not 0 <= self.eps <= 1 or not 0 <= self.prob <= 1:
            raise ValueError("probabilities must lie in [0, 1]")
        if self.sigma_b <= 0:
            raise ValueError("sigma_b must be positive")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")

    @classmethod
    def bernoulli(cls, eps, value=1.0):
        return cls("bernoulli", eps=eps, value=value)

    @classmethod
    def gauss_bernoulli(cls, eps, sigma_b=1.0):
        return cls("gauss_bernoulli", eps=eps, sigma_b=sigma_b)

    @classmethod
    def gaussian_binomial(cls, trials=5, prob=0.3):
        return cls("gaussian_binomial", trials=trials, prob=prob)

    def second_moment(self):
        if self.kind == "bernoulli":
            return self.eps * self.value**2
        if self.kind == "gauss_bernoulli":
            return self.eps * self.sigma_b**2
        m = self.trials * self.prob
        return self.trials * self.prob * (1 - self.prob) + m * m

    def sample(self, rng, size):
        if self.kind == "bernoulli":
            return self.value * (rng.random(size) < self.eps)
        if self.kind == "gauss_bernoulli":
            mask = rng.random(size) < self.eps
            return mask * self.sigma_b * rng.standard_normal(size)
        b = rng.binomial(self.trials, self.prob, size)
        return b * rng.standard_normal(size)


@dataclass(frozen=True)
class AmpConfig:
    """Problem geometry and Monte Carlo settings for state evolution."""

    delta: float
    sigma_w: float = 0.0
    p: int = 1000
    mc_samples: int = 64
    tol: float = 1e-10
    max_iters: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.sigma_w < 0:
            raise ValueError("sigma_w must be non-negative")
        if self.p < 1 or self.mc_samples < 1 or self.max_iters < 1:
            raise ValueError("p, mc_samples and max_iters must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be positive")

    @property
    def n(self):
        return self.delta * self.p


@dataclass
class StateEvolutionResult:
    tau: float
    iterations: int
    converged: bool
    mc_samples: int
    seed: int
    history: list = field(default_factory=list)
    tau_se: float = 0.0


@functools.lru_cache(maxsize=32)
def _cached_draws(prior, p, mc_samples, seed):
    children = np.random.SeedSequence(seed).spawn(mc_samples)
    B = np.empty((mc_samples, p))
    Z = np.empty((mc_samples, p))
    for r, child in enumerate(children):
        rng = np.random.default_rng(child)
        B[r] = prior.sample(rng, p)
        Z[r] = rng.standard_normal(p)
    B.flags.writeable = False
    Z.flags.writeable = False
    return B, Z


def mc_draws(prior, cfg):
    """Signal and noise replicates ``(B, Z)``, each of shape ``(mc_samples, p)``."""
    return _cached_draws(prior, cfg.p, cfg.mc_samples, cfg.seed)


def _se_map(alpha, tau, B, Z, cfg):
    eta = prox_sorted_l1(B + tau * Z, alpha * tau)
    per_rep = np.sum((eta - B) ** 2, axis=1) / cfg.n
    return math.sqrt(cfg.sigma_w**2 + per_rep.mean()), per_rep


def _state_evolution(alpha, prior, cfg, tau0=None):
    alpha = np.asarray(alpha, dtype=float)
    if alpha.size != cfg.p:
        raise ValueError(f"alpha has length {alpha.size}, expected p={cfg.p}")
    if not np.any(alpha):
        return _tau_at_zero_alpha(cfg)
    B, Z = mc_draws(prior, cfg)
    start = math.sqrt(cfg.sigma_w**2 + prior.second_moment() / cfg.delta)
    if start == 0:
        raise DegenerateTauError("sigma_w = 0 and E[Pi^2] = 0 give tau = 0")
    tau = start if tau0 is None else float(tau0)
    history = [tau]
    converged = False
    per_rep = np.zeros(cfg.mc_samples)
    it = 0
    for it in range(1, cfg.max_iters + 1):
        new_tau, per_rep = _se_map(alpha, tau, B, Z, cfg)
        history.append(new_tau)
        if new_tau > 1e6 * start:
            tau = new_tau
            break
        if abs(new_tau - tau) < cfg.tol:
            tau = new_tau
            converged = True
            break
        tau = new_tau
    if tau == 0:
        raise DegenerateTauError("state evolution collapsed to tau = 0")
    tau_se = per_rep.std(ddof=1) / math.sqrt(cfg.mc_samples) / (2 * tau) if cfg.mc_samples > 1 else 0.0
    return StateEvolutionResult(tau, it, converged, cfg.mc_samples, cfg.seed, history, tau_se)


def _tau_at_zero_alpha(cfg):
    # identity prox: tau^2 = sigma_w^2 + tau^2 / delta
    if cfg.sigma_w == 0:
        tau = 0.0
    elif cfg.delta > 1:
        tau = cfg.sigma_w / math.sqrt(1 - 1 / cfg.delta)
    else:
        raise DegenerateTauError("alpha = 0 with sigma_w > 0 and delta <= 1 has no finite tau")
    return StateEvolutionResult(tau, 0, True, cfg.mc_samples, cfg.seed, [tau], 0.0)


def state_evolution_tau(alpha, prior, cfg, tau0=None):
    """Solve the finite-p state evolution for the effective noise ``tau``.

    Iterates ``tau^2 <- sigma_w^2 + E||prox(beta + tau Z; alpha tau) - beta||^2 / (delta p)``
    from ``tau0`` (default ``sqrt(sigma_w^2 + E[Pi^2] / delta)``).  The result is
    flagged ``converged=False`` when ``max_iters`` runs out or tau blows up.
    """
    alpha = as_penalty(alpha, cfg.p, "alpha")
    return _state_evolution(alpha, prior, cfg, tau0)


def _calibration_factor(alpha, tau, prior, cfg):
    B, Z = mc_draws(prior, cfg)
    eta = prox_sorted_l1(B + tau * Z, alpha * tau)
    return 1.0 - modified_l0_rows(eta).mean() / cfg.n


def calibrate_alpha_to_lambda(alpha, tau, prior, cfg):
    """Map a threshold sequence ``alpha`` to the SLOPE penalty ``lambda``.

    ``lambda = alpha * tau * (1 - E||prox(beta + tau Z; alpha tau)||_0^* / n)``.
    """
    alpha = as_penalty(alpha, cfg.p, "alpha")
    if not np.any(alpha):
        return np.zeros_like(alpha)
    factor = _calibration_factor(alpha, tau, prior, cfg)
    if factor <= 0:
        raise CalibrationError(
            f"calibration factor {factor:.4g} <= 0: alpha is outside the calibration domain"
        )
    return alpha * tau * factor


def _calibration_scale(alpha, prior, cfg, tau0=None):
    """Return ``(tau(alpha) * factor(alpha), tau)``; ``nan`` when tau is unavailable."""
    try:
        se = _state_evolution(alpha, prior, cfg, tau0)
    except DegenerateTauError:
        return math.nan, None
    if not se.converged:
        return math.nan, None
    return se.tau * _calibration_factor(alpha, se.tau, prior, cfg), se.tau


def calibrate_lambda_to_alpha(lam, prior, cfg, tau_hint=None, c_hint=None):
    """Invert the calibration: find ``alpha = lambda / c`` with ``c = c(alpha)``.

    Because the calibration is parallel, the search is a scalar root-finding
    problem in ``c``, bracketed from ``[1e-8, 10 * tau_max]`` with geometric
    expansion of the upper end (or first from ``c_hint / 1.2 .. c_hint * 1.2``).
    The Monte Carlo count makes ``c(alpha)`` piecewise continuous, so the
    result is the sign-change point; it is rejected when the residual there
    exceeds ``CALIBRATION_RTOL * c`` (e.g. the divergence boundary of tau).
    """
    lam = np.asarray(lam, dtype=float)
    if lam.size != cfg.p:
        raise ValueError(f"lambda has length {lam.size}, expected p={cfg.p}")
    if not np.any(lam):
        return np.zeros_like(lam)
    tau_max = math.sqrt(cfg.sigma_w**2 + prior.second_moment() / cfg.delta)
    last_tau = [tau_hint]

    def h(c):
        scale, tau = _calibration_scale(lam / c, prior, cfg, last_tau[0])
        if math.isnan(scale):
            # tau diverges for tiny alpha: that side of the bracket is "c too large"
            return c
        last_tau[0] = tau
        return c - scale

    bracket = None
    if c_hint is not None and c_hint > 0:
        lo, hi = c_hint / 1.2, c_hint * 1.2
        if h(lo) < 0 < h(hi):
            bracket = (lo, hi)
    if bracket is None:
        lo, hi = 1e-8, 10 * tau_max
        if h(lo) >= 0:
            raise CalibrationError("no sign change at the lower end of the calibration bracket")
        expansions = 0
        while h(hi) <= 0:
            hi *= 2
            expansions += 1
            if expansions > 60:
                raise CalibrationError("bracket expansion failed to find a sign change")
        bracket = (lo, hi)
    c = optimize.brentq(h, *bracket, xtol=1e-13, rtol=1e-11, maxiter=200)
    alpha = lam / c
    scale, _ = _calibration_scale(alpha, prior, cfg, last_tau[0])
    if math.isnan(scale) or scale <= 0 or abs(scale - c) > CALIBRATION_RTOL * c:
        raise CalibrationError("lambda is outside the range of the calibration")
    return alpha


def asymptotic_mse(tau, cfg):
    """Predicted ``plim ||beta_hat - beta||^2 / p = delta (tau^2 - sigma_w^2)``."""
    if tau < cfg.sigma_w:
        raise ValueError(f"tau={tau} is below sigma_w={cfg.sigma_w}")
    return cfg.delta * (tau**2 - cfg.sigma_w**2)


@dataclass
class AmpTrajectory:
    """Iterates of an AMP run.

    ``tau[t]`` is the noise level used by the denoiser at step ``t + 1`` and
    ``mse[t]`` the empirical ``||beta^t - beta||^2 / p`` (``nan`` without ground truth).
    """

    beta: np.ndarray
    tau: list
    mse: list
    diverged: bool = False
    lambda_: np.ndarray | None = None


def _empirical_mse(beta, beta_true):
    if beta_true is None:
        return math.nan
    return float(np.mean((beta - beta_true) ** 2))


def run_slope_amp(dataset, alpha=None, iters=100, prior=None, cfg=None, lam=None,
                  tau_mode="empirical"):
    """Run SLOPE AMP on ``dataset``.

    ``s^{t+1} = X^T z^t + beta^t``, ``beta^{t+1} = prox(s^{t+1}; alpha tau_t)`` and
    ``z^{t+1} = y - X beta^{t+1} + z^t ||beta^{t+1}||_0^* / n``.  ``tau_t`` is
    ``||z^t|| / sqrt(n)`` (``tau_mode="empirical"``) or the state-evolution
    recursion (``tau_mode="se"``, needs ``prior`` and ``cfg``).  Pass ``lam``
    instead of ``alpha`` to calibrate first (needs ``prior`` and ``cfg``).

    The X columns are assumed to be scaled like i.i.d. N(0, 1/n) entries.
    """
    X, y = dataset.X, dataset.y
    n, p = X.shape
    if alpha is None:
        if lam is None or prior is None or cfg is None:
            raise ValueError("give alpha, or lam together with prior and cfg")
        alpha = calibrate_lambda_to_alpha(lam, prior, cfg)
    alpha = as_penalty(alpha, p, "alpha")
    if tau_mode not in ("empirical", "se"):
        raise ValueError("tau_mode must be 'empirical' or 'se'")
    if tau_mode == "se":
        if prior is None or cfg is None:
            raise ValueError("tau_mode='se' needs prior and cfg")
        B, Z = mc_draws(prior, cfg)
        tau = math.sqrt(cfg.sigma_w**2 + prior.second_moment() / cfg.delta)
    beta = np.zeros(p)
    z = y.copy()
    if tau_mode == "empirical":
        tau = np.linalg.norm(z) / math.sqrt(n)
    tau0 = tau
    taus, mses = [], [_empirical_mse(beta, dataset.beta_true)]
    diverged = False
    for _ in range(iters):
        taus.append(tau)
        s = X.T @ z + beta
        beta = prox_sorted_l1(s, alpha * tau)
        z = y - X @ beta + z * (modified_l0(beta) / n)
        mses.append(_empirical_mse(beta, dataset.beta_true))
        if tau_mode == "empirical":
            tau = np.linalg.norm(z) / math.sqrt(n)
        else:
            tau, _ = _se_map(alpha, tau, B, Z, cfg)
        if not np.isfinite(tau) or tau > 1e6 * max(tau0, 1e-300):
            diverged = True
            break
    lam_implied = alpha * taus[-1] * (1 - modified_l0(beta) / n)
    return AmpTrajectory(beta=beta, tau=taus, mse=mses, diverged=diverged, lambda_=lam_implied)


def _log_normal_pdf(s, var):
    return -0.5 * (np.log(2 * np.pi * var) + s * s / var)


def _posterior_nonzero(s, tau, e, sigma_b):
    s = np.asarray(s, dtype=float)
    if e >= 1:
        return np.zeros_like(s)
    if e <= 0:
        return np.ones_like(s)
    log_odds = (
        math.log1p(-e) - math.log(e)
        + _log_normal_pdf(s, sigma_b**2 + tau**2) - _log_normal_pdf(s, tau**2)
    )
    return special.expit(log_odds)


def mmse_denoiser(s, tau, e, sigma_b=1.0):
    """Posterior mean ``E[beta | beta + tau z = s]`` for the Bernoulli-Gaussian prior.

    ``beta = 0`` with probability ``e``, otherwise ``beta ~ N(0, sigma_b^2)``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    s = np.asarray(s, dtype=float)
    shrink = sigma_b**2 / (sigma_b**2 + tau**2)
    return _posterior_nonzero(s, tau, e, sigma_b) * shrink * s


def mmse_denoiser_derivative(s, tau, e, sigma_b=1.0):
    """Elementwise derivative of :func:`mmse_denoiser` in ``s``."""
    s = np.asarray(s, dtype=float)
    v0, v1 = tau**2, sigma_b**2 + tau**2
    shrink = sigma_b**2 / v1
    post = _posterior_nonzero(s, tau, e, sigma_b)
    dlog_odds = s * (1 / v0 - 1 / v1)
    return shrink * (post + s * post * (1 - post) * dlog_odds)


def _zero_probability(prior):
    if prior.kind != "gauss_bernoulli":
        raise ValueError("the MMSE denoiser needs a gauss_bernoulli prior")
    return 1.0 - prior.eps


_HERMITE_NODES, _HERMITE_WEIGHTS = np.polynomial.hermite_e.hermegauss(201)
_HERMITE_WEIGHTS = _HERMITE_WEIGHTS / _HERMITE_WEIGHTS.sum()


def mmse_risk(tau, prior):
    """Scalar Bayes risk ``E[(eta(beta + tau z) - beta)^2]`` by Gauss-Hermite quadrature."""
    e = _zero_probability(prior)
    sb = prior.sigma_b
    second = 0.0
    for weight, scale in ((e, tau), (1 - e, math.sqrt(sb**2 + tau**2))):
        if weight == 0:
            continue
        s = scale * _HERMITE_NODES
        second += weight * np.sum(_HERMITE_WEIGHTS * mmse_denoiser(s, tau, e, sb) ** 2)
    return max(prior.second_moment() - second, 0.0)


def mmse_state_evolution(prior, cfg, tau0=None):
    """Fixed point of ``tau^2 = sigma_w^2 + mmse_risk(tau) / delta``."""
    tau = math.sqrt(cfg.sigma_w**2 + prior.second_moment() / cfg.delta) if tau0 is None else tau0
    if tau == 0:
        raise DegenerateTauError("sigma_w = 0 and E[Pi^2] = 0 give tau = 0")
    history = [tau]
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        new_tau = math.sqrt(cfg.sigma_w**2 + mmse_risk(tau, prior) / cfg.delta)
        history.append(new_tau)
        done = abs(new_tau - tau) < cfg.tol
        tau = new_tau
        if done:
            converged = True
            break
        if tau < 1e-12:
            break
    return StateEvolutionResult(tau, it, converged, 0, cfg.seed, history)


def _divergence(s, tau, e, sigma_b, h=1e-6):
    d = mmse_denoiser_derivative(s, tau, e, sigma_b)
    bad = ~np.isfinite(d)
    if np.any(bad):
        sb = s[bad]
        d[bad] = (mmse_denoiser(sb + h, tau, e, sigma_b) - mmse_denoiser(sb - h, tau, e, sigma_b)) / (2 * h)
    return float(np.sum(d))


def run_mmse_amp(dataset, prior, iters=100, cfg=None, tau_mode="se"):
    """AMP with the Bernoulli-Gaussian posterior-mean denoiser.

    With ``tau_mode="se"`` the noise level follows the scalar state evolution
    (needs ``cfg``); ``"empirical"`` uses ``||z^t|| / sqrt(n)``.
    """
    e = _zero_probability(prior)
    X, y = dataset.X, dataset.y
    n, p = X.shape
    if tau_mode == "se":
        if cfg is None:
            raise ValueError("tau_mode='se' needs cfg")
        tau = math.sqrt(cfg.sigma_w**2 + prior.second_moment() / cfg.delta)
    elif tau_mode == "empirical":
        tau = np.linalg.norm(y) / math.sqrt(n)
    else:
        raise ValueError("tau_mode must be 'empirical' or 'se'")
    tau0 = tau
    beta = np.zeros(p)
    z = y.copy()
    taus, mses = [], [_empirical_mse(beta, dataset.beta_true)]
    diverged = False
    for _ in range(iters):
        taus.append(tau)
        s = X.T @ z + beta
        beta = mmse_denoiser(s, tau, e, prior.sigma_b)
        z = y - X @ beta + z * (_divergence(s, tau, e, prior.sigma_b) / n)
        mses.append(_empirical_mse(beta, dataset.beta_true))
        if tau_mode == "se":
            tau = math.sqrt(cfg.sigma_w**2 + mmse_risk(tau, prior) / cfg.delta)
        else:
            tau = np.linalg.norm(z) / math.sqrt(n)
        if tau <= 1e-12:
            break
        if not np.isfinite(tau) or tau > 1e6 * tau0:
            diverged = True
            break
    return AmpTrajectory(beta=beta, tau=taus, mse=mses, diverged=diverged)

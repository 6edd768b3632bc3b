"""Penalty design: tau-gradient, projection onto S, projected gradient descent
and coordinate descent over k-level penalties."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import amp
from .amp import CalibrationError, DegenerateTauError, mc_draws
from .sorted_l1 import _new_run_flags, as_penalty, decreasing_projection, prox_sorted_l1

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# gradient of tau

def _gradient_terms(alpha, tau, prior, cfg):
    """Return ``(numerator, D)`` with ``dtau/dalpha_i = numerator_i / D``.

    Everything is computed in rank order: position ``i`` of a sorted replicate
    is the coordinate ``sigma(i)``, which is penalized by ``alpha_i``.
    """
    if tau <= 0:
        raise DegenerateTauError("gradient needs tau > 0")
    B, Z = mc_draws(prior, cfg)
    m, p = B.shape
    eta = prox_sorted_l1(B + tau * Z, alpha * tau)
    order = np.argsort(-np.abs(eta), axis=1, kind="stable")
    eta_s = np.take_along_axis(eta, order, axis=1)
    B_s = np.take_along_axis(B, order, axis=1)
    Z_s = np.take_along_axis(Z, order, axis=1)
    sgn = np.sign(eta_s)
    u = (eta_s - B_s) * sgn
    q = sgn * Z_s - alpha[None, :]
    runs = np.cumsum(_new_run_flags(np.abs(eta_s)), axis=1) - 1
    gid = (runs + p * np.arange(m)[:, None]).ravel()
    size = np.bincount(gid, minlength=m * p)
    a_sum = np.bincount(gid, weights=u.ravel(), minlength=m * p)
    q_sum = np.bincount(gid, weights=q.ravel(), minlength=m * p)
    nz = size > 0
    avg_u = np.zeros(m * p)
    avg_u[nz] = a_sum[nz] / size[nz]
    numerator = (avg_u[gid].reshape(m, p) * tau).mean(axis=0)
    s_term = np.sum(avg_u[nz] * q_sum[nz]) / m
    return numerator, -cfg.n * tau + s_term


def compute_D(alpha, tau, prior, cfg, mode="exact"):
    """Denominator ``D(alpha, tau)`` of the tau-gradient (negative); ``mode="unit"`` gives -1."""
    if mode == "unit":
        return -1.0
    if mode != "exact":
        raise ValueError("mode must be 'exact' or 'unit'")
    alpha = np.asarray(alpha, dtype=float)
    return float(_gradient_terms(alpha, tau, prior, cfg)[1])


def gradient_tau_alpha(alpha, tau, prior, cfg, d_mode="exact"):
    """Gradient of the state-evolution fixed point ``tau(alpha)``.

    Parameters
    ----------
    alpha : array_like
        Threshold sequence (length ``cfg.p``).
    tau : float
        ``state_evolution_tau(alpha, prior, cfg).tau``.
    d_mode : {"exact", "unit"}
        ``"unit"`` replaces ``D`` by -1, which rescales the gradient by ``|D|``.

    Returns
    -------
    ndarray
        ``dtau / dalpha_i`` for every rank ``i``.
    """
    alpha = np.asarray(alpha, dtype=float)
    numerator, D = _gradient_terms(alpha, tau, prior, cfg)
    if d_mode == "unit":
        D = -1.0
    elif d_mode != "exact":
        raise ValueError("d_mode must be 'exact' or 'unit'")
    return numerator / D


# ---------------------------------------------------------------------------
# projection onto non-negative non-increasing vectors

def project_on_S(gamma):
    """Euclidean projection onto ``{x : x_1 >= x_2 >= ... >= x_p >= 0}``.

    Adjacent violators are pooled into their running average, left to right,
    and the result is truncated at zero.
    """
    return np.maximum(decreasing_projection(gamma), 0.0)


# ---------------------------------------------------------------------------
# projected gradient descent under the AMP regime

@dataclass
class PGDConfig:
    """Settings for :func:`pgd_design`.

    ``step`` is the constant step in the chosen ``d_mode``; with
    ``step_schedule="scaled"`` the step at iteration ``t`` is ``step * |D_t|``.
    ``projection="alpha"`` projects the gradient step directly onto S;
    ``"lambda"`` maps it to the penalty regime, projects there and maps back.
    With ``line_search`` a step is halved until tau decreases.
    """

    step: float = 2.0
    step_schedule: str = "constant"
    momentum: str = "none"
    momentum_coef: float = 0.9
    d_mode: str = "unit"
    max_iters: int = 100
    tol: float = 1e-6
    init: object = "lasso"
    lasso_grid: int = 40
    max_halvings: int = 20
    projection: str = "alpha"
    line_search: bool = True

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.step_schedule not in ("constant", "scaled"):
            raise ValueError("step_schedule must be 'constant' or 'scaled'")
        if self.momentum not in ("none", "heavy_ball", "nesterov"):
            raise ValueError("momentum must be 'none', 'heavy_ball' or 'nesterov'")
        if not 0 <= self.momentum_coef < 1:
            raise ValueError("momentum_coef must lie in [0, 1)")
        if self.d_mode not in ("exact", "unit"):
            raise ValueError("d_mode must be 'exact' or 'unit'")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.projection not in ("alpha", "lambda"):
            raise ValueError("projection must be 'alpha' or 'lambda'")


@dataclass
class PGDResult:
    alpha: np.ndarray
    lam: np.ndarray
    tau: float
    tau_history: list
    alpha_init: np.ndarray
    lasso_alpha: float | None = None
    iterations: int = 0


def tune_lasso_alpha(prior, cfg, n_grid=40, lo=0.05, hi=10.0, refine=True):
    """Constant threshold minimizing ``tau``: geometric scan, then golden refinement.

    Returns ``(alpha_scalar, tau)``.
    """
    grid = np.geomspace(lo, hi, n_grid)
    taus = np.full(n_grid, np.inf)
    tau_prev = None
    for i, a in enumerate(grid[::-1]):
        try:
            se = amp._state_evolution(np.full(cfg.p, a), prior, cfg, tau_prev)
        except DegenerateTauError:
            continue
        if se.converged:
            taus[n_grid - 1 - i] = se.tau
            tau_prev = se.tau
    best = int(np.argmin(taus))
    if not np.isfinite(taus[best]):
        raise DegenerateTauError("no constant threshold gave a finite tau")
    if not refine:
        return float(grid[best]), float(taus[best])

    def f(a):
        se = amp._state_evolution(np.full(cfg.p, a), prior, cfg, taus[best])
        return se.tau if se.converged else math.inf

    a_lo = grid[max(best - 1, 0)]
    a_hi = grid[min(best + 1, n_grid - 1)]
    a, t = golden_section(f, a_lo, a_hi, n_evals=25)
    if t < taus[best]:
        return float(a), float(t)
    return float(grid[best]), float(taus[best])


def _calibration_scale(alpha, prior, cfg, tau0=None):
    se = amp._state_evolution(alpha, prior, cfg, tau0)
    if not se.converged:
        raise CalibrationError("state evolution did not converge")
    factor = amp._calibration_factor(alpha, se.tau, prior, cfg)
    if factor <= 0:
        raise CalibrationError("calibration factor is not positive")
    return se.tau * factor, se.tau


def _project_step(trial, prior, cfg, tau0, c_prev, projection):
    # returns the projected threshold sequence and the calibration scale used
    if projection == "alpha":
        cand = project_on_S(trial)
        if not np.any(cand):
            raise CalibrationError("projected thresholds vanished")
        # the candidate must still correspond to some SLOPE penalty
        _calibration_scale(cand, prior, cfg, tau0)
        return cand, c_prev
    c_trial, _ = _calibration_scale(trial, prior, cfg, tau0)
    lam = project_on_S(c_trial * trial)
    if not np.any(lam):
        raise CalibrationError("projected penalty vanished")
    cand = amp.calibrate_lambda_to_alpha(lam, prior, cfg, tau0, c_prev)
    return cand, float(np.max(lam) / np.max(cand))


def _pgd_step(alpha, prev_alpha, tau, mu, c_prev, prior, cfg, pgd):
    # one (possibly accelerated) projected step; None when every halving failed
    if pgd.momentum == "nesterov" and mu > 0:
        base = project_on_S(alpha + mu * (alpha - prev_alpha))
        base_tau = amp._state_evolution(base, prior, cfg, tau).tau
    else:
        base, base_tau = alpha, tau
    numerator, D = _gradient_terms(base, base_tau, prior, cfg)
    grad = numerator / (D if pgd.d_mode == "exact" else -1.0)
    if not np.any(grad):
        return "zero"
    step = pgd.step * (abs(D) if pgd.step_schedule == "scaled" else 1.0)
    extra = mu * (alpha - prev_alpha) if pgd.momentum == "heavy_ball" else 0.0
    for _ in range(pgd.max_halvings + 1):
        trial = base - step * grad + extra
        try:
            cand, c_cand = _project_step(trial, prior, cfg, base_tau, c_prev, pgd.projection)
            se = amp._state_evolution(cand, prior, cfg, base_tau)
            if not se.converged:
                raise CalibrationError("state evolution did not converge")
            if not pgd.line_search or se.tau < tau:
                return cand, se.tau, c_cand
        except (CalibrationError, DegenerateTauError) as exc:
            log.debug("pgd: step %.3g rejected (%s), halving", step, exc)
        step *= 0.5
        extra = extra * 0.5
    return None


def pgd_design(prior, cfg, pgd=None):
    """Design a full threshold sequence by projected gradient descent on ``tau``.

    Each iteration takes a gradient step on ``alpha`` and projects it onto
    non-negative non-increasing vectors (see ``PGDConfig.projection``).
    The best iterate (smallest ``tau``) is returned together with its
    calibrated penalty.
    """
    pgd = pgd or PGDConfig()
    lasso_alpha = None
    if isinstance(pgd.init, str):
        if pgd.init != "lasso":
            raise ValueError("init must be 'lasso' or an alpha vector")
        lasso_alpha, _ = tune_lasso_alpha(prior, cfg, n_grid=pgd.lasso_grid)
        alpha = np.full(cfg.p, lasso_alpha)
    else:
        alpha = as_penalty(pgd.init, cfg.p, "alpha")
    alpha_init = alpha.copy()
    se = amp._state_evolution(alpha, prior, cfg)
    tau = se.tau
    history = [tau]
    best_alpha, best_tau = alpha.copy(), tau
    prev_alpha = alpha.copy()
    c_prev = None
    it = 0
    for it in range(1, pgd.max_iters + 1):
        found = None
        # with momentum, a failed step restarts once from the plain gradient step
        for restart in ((False, True) if pgd.momentum != "none" else (True,)):
            mu = 0.0 if restart else pgd.momentum_coef
            found = _pgd_step(alpha, prev_alpha, tau, mu, c_prev, prior, cfg, pgd)
            if found is not None:
                break
        if found is None:
            if pgd.line_search:
                log.info("pgd: no descent step at iteration %d, stopping", it)
                it -= 1
                break
            raise CalibrationError(
                f"pgd iteration {it}: calibration failed after {pgd.max_halvings} step halvings"
            )
        if found == "zero":
            log.info("pgd: zero gradient at iteration %d, stopping", it)
            it -= 1
            break
        new_alpha, new_tau, c_prev = found
        prev_alpha, alpha, old_tau, tau = alpha, new_alpha, tau, new_tau
        history.append(tau)
        if tau < best_tau:
            best_alpha, best_tau = alpha.copy(), tau
        log.debug("pgd iteration %d: tau=%.6f", it, tau)
        if abs(old_tau - tau) < pgd.tol and pgd.momentum == "none":
            break
        if pgd.momentum != "none" and len(history) > 10 and (
            min(history[:-10]) - best_tau < pgd.tol
        ):
            break
    best_lam = amp.calibrate_alpha_to_lambda(best_alpha, best_tau, prior, cfg)
    return PGDResult(
        alpha=best_alpha,
        lam=best_lam,
        tau=best_tau,
        tau_history=history,
        alpha_init=alpha_init,
        lasso_alpha=lasso_alpha,
        iterations=it,
    )


# ---------------------------------------------------------------------------
# k-level penalties

@dataclass(frozen=True)
class KLevelPenalty:
    """Penalty with ``k`` values: ``magnitudes`` on blocks ending at ``splits``.

    With ``S_0 = 0`` and ``S_k = p`` the 1-based entries ``S_{i-1}+1 .. S_i``
    hold ``magnitudes[i-1]``.
    """

    magnitudes: tuple
    splits: tuple
    p: int

    def __post_init__(self):
        mags = np.asarray(self.magnitudes, dtype=float)
        splits = np.asarray(self.splits, dtype=int)
        object.__setattr__(self, "magnitudes", tuple(float(m) for m in mags))
        object.__setattr__(self, "splits", tuple(int(s) for s in splits))
        k = mags.size
        if k < 1:
            raise ValueError("need at least one level")
        if splits.size != k - 1:
            raise ValueError(f"{k} levels need {k - 1} splits, got {splits.size}")
        if np.any(np.diff(mags) > 0) or mags[-1] < 0:
            raise ValueError("magnitudes must be non-increasing and non-negative")
        bounds = np.array([0, *splits, self.p], dtype=int)
        if np.any(np.diff(bounds) <= 0):
            raise ValueError("splits must satisfy 0 < S_1 < ... < S_{k-1} < p")

    @property
    def k(self):
        return len(self.magnitudes)

    def expand(self):
        return expand_k_level(self)

    def with_magnitude(self, i, value):
        mags = list(self.magnitudes)
        mags[i] = value
        return KLevelPenalty(tuple(mags), self.splits, self.p)

    def with_split(self, i, value):
        splits = list(self.splits)
        splits[i] = value
        return KLevelPenalty(self.magnitudes, tuple(splits), self.p)

    @classmethod
    def from_sequence(cls, lam):
        """Compress a penalty sequence into its canonical k-level form."""
        lam = as_penalty(lam)
        change = np.flatnonzero(np.diff(lam) != 0) + 1
        starts = np.array([0, *change], dtype=int)
        return cls(tuple(lam[starts]), tuple(change), lam.size)

    def refine(self):
        """Split the longest block in two, giving an equivalent (k+1)-level penalty."""
        bounds = np.array([0, *self.splits, self.p], dtype=int)
        lengths = np.diff(bounds)
        i = int(np.argmax(lengths))
        if lengths[i] < 2:
            raise ValueError("cannot add a level: every block has length 1")
        mid = int(bounds[i] + lengths[i] // 2)
        mags = list(self.magnitudes)
        mags.insert(i + 1, mags[i])
        splits = sorted(list(self.splits) + [mid])
        return KLevelPenalty(tuple(mags), tuple(splits), self.p)


def expand_k_level(kp):
    """Full length-``p`` penalty vector of a :class:`KLevelPenalty`."""
    bounds = np.array([0, *kp.splits, kp.p], dtype=int)
    return np.repeat(np.asarray(kp.magnitudes, dtype=float), np.diff(bounds))


# ---------------------------------------------------------------------------
# coordinate descent

@dataclass
class SearchConfig:
    """Zeroth-order search settings for :func:`cd_design`.

    Magnitudes are searched on ``grid_points`` evenly spaced candidates in the
    open interval between the neighbouring levels, then refined by golden
    section around the best candidate until ``magnitude_evals`` evaluations are
    used.  Splits are scanned with stride ``max(1, width // split_grid)`` and
    refined at stride 1 (``split_method="grid"``) or searched by integer
    ternary search (``"bisection"``).
    """

    magnitude_evals: int = 30
    grid_points: int = 10
    split_grid: int = 32
    split_method: str = "grid"
    max_sweeps: int = 20
    rel_tol: float = 1e-9
    order: str = "magnitudes_first"
    upper_cap: float | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.magnitude_evals < 3 or self.grid_points < 2:
            raise ValueError("need at least 3 magnitude evaluations and 2 grid points")
        if self.split_method not in ("grid", "bisection"):
            raise ValueError("split_method must be 'grid' or 'bisection'")
        if self.order not in ("magnitudes_first", "interleaved"):
            raise ValueError("order must be 'magnitudes_first' or 'interleaved'")


@dataclass
class CDResult:
    penalty: KLevelPenalty
    objective: float
    trajectory: list
    evaluations: list = field(default_factory=list)
    sweeps: int = 0
    skipped: list = field(default_factory=list)


def golden_section(f, lo, hi, n_evals=30):
    """Minimize ``f`` on ``[lo, hi]`` with ``n_evals`` evaluations; return ``(x, f(x))``."""
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    best = (c, fc) if fc <= fd else (d, fd)
    for _ in range(max(n_evals - 2, 0)):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
            if fc < best[1]:
                best = (c, fc)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
            if fd < best[1]:
                best = (d, fd)
    return best


class _Evaluator:
    def __init__(self, objective, jobs):
        self.objective = objective
        self.log = []
        self.failed = 0
        self.jobs = jobs

    def _one(self, kp):
        try:
            value = float(self.objective(expand_k_level(kp)))
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("objective evaluation failed: %s", exc)
            value = math.nan
        return value

    def __call__(self, kp):
        value = self._one(kp)
        self._record(kp, value)
        return value if np.isfinite(value) else math.inf

    def many(self, kps):
        if self.jobs > 1 and len(kps) > 1:
            with ThreadPoolExecutor(self.jobs) as pool:
                values = list(pool.map(self._one, kps))
        else:
            values = [self._one(kp) for kp in kps]
        for kp, v in zip(kps, values):
            self._record(kp, v)
        return [v if np.isfinite(v) else math.inf for v in values]

    def _record(self, kp, value):
        if not np.isfinite(value):
            self.failed += 1
        self.log.append((kp, value))


def _search_magnitude(evaluate, kp, i, upper, search):
    lo = kp.magnitudes[i + 1] if i + 1 < kp.k else 0.0
    hi = kp.magnitudes[i - 1] if i > 0 else upper
    if not hi > lo:
        return None
    grid = lo + (hi - lo) * (np.arange(1, search.grid_points + 1) / (search.grid_points + 1))
    cands = [kp.with_magnitude(i, float(v)) for v in grid]
    values = evaluate.many(cands)
    j = int(np.argmin(values))
    best_v, best_x = values[j], float(grid[j])
    a = lo if j == 0 else float(grid[j - 1])
    b = hi if j == len(grid) - 1 else float(grid[j + 1])
    remaining = search.magnitude_evals - search.grid_points
    if remaining >= 3:
        x, v = golden_section(lambda m: evaluate(kp.with_magnitude(i, m)), a, b, remaining)
        if v < best_v:
            best_v, best_x = v, x
    return best_x, best_v


def _search_split(evaluate, kp, i, search):
    lo = kp.splits[i - 1] if i > 0 else 0
    hi = kp.splits[i + 1] if i + 1 < len(kp.splits) else kp.p
    cands = np.arange(lo + 1, hi)
    if cands.size == 0:
        return None
    if search.split_method == "bisection":
        return _ternary_split(evaluate, kp, i, lo + 1, hi - 1)
    stride = max(1, (hi - lo) // search.split_grid)
    coarse = cands[::stride]
    values = evaluate.many([kp.with_split(i, int(s)) for s in coarse])
    j = int(np.argmin(values))
    best_s, best_v = int(coarse[j]), values[j]
    if stride > 1:
        fine = [s for s in range(max(lo + 1, best_s - stride + 1), min(hi, best_s + stride))
                if s != best_s]
        fvals = evaluate.many([kp.with_split(i, s) for s in fine])
        for s, v in zip(fine, fvals):
            if v < best_v:
                best_s, best_v = s, v
    return best_s, best_v


def _ternary_split(evaluate, kp, i, a, b):
    cache = {}

    def f(s):
        if s not in cache:
            cache[s] = evaluate(kp.with_split(i, int(s)))
        return cache[s]

    while b - a > 2:
        m1 = a + (b - a) // 3
        m2 = b - (b - a) // 3
        if f(m1) <= f(m2):
            b = m2
        else:
            a = m1
    best = min(range(a, b + 1), key=f)
    return best, f(best)


def cd_design(objective, init, search=None):
    """Coordinate descent over the magnitudes and splits of a k-level penalty.

    Parameters
    ----------
    objective : callable
        Maps a full penalty vector to the value to minimize; failures may be
        signalled by raising ``ValueError``/``ArithmeticError`` or returning nan,
        and such candidates are never accepted.
    init : KLevelPenalty
        Starting point.
    search : SearchConfig, optional

    Returns
    -------
    CDResult
        ``trajectory`` holds the objective after every accepted coordinate
        update (first entry: the initial value), so it is non-increasing.
    """
    search = search or SearchConfig()
    evaluate = _Evaluator(objective, search.jobs)
    kp = init
    current = evaluate(kp)
    if not np.isfinite(current):
        raise ValueError("objective is not evaluable at the initial penalty")
    trajectory = [current]
    skipped = []
    if search.order == "magnitudes_first":
        coords = [("m", i) for i in range(kp.k)] + [("s", i) for i in range(kp.k - 1)]
    else:
        coords = []
        for i in range(kp.k):
            coords.append(("m", i))
            if i < kp.k - 1:
                coords.append(("s", i))
    sweeps = 0
    while sweeps < search.max_sweeps:
        sweeps += 1
        start = current
        for kind, i in coords:
            failed_before = evaluate.failed
            if kind == "m":
                upper = 2.0 * kp.magnitudes[0]
                if search.upper_cap is not None:
                    upper = max(upper, search.upper_cap)
                if upper <= 0:
                    upper = 1.0
                found = _search_magnitude(evaluate, kp, i, upper, search)
                if found is not None and found[1] < current:
                    kp = kp.with_magnitude(i, found[0])
                    current = found[1]
                    trajectory.append(current)
            else:
                found = _search_split(evaluate, kp, i, search)
                if found is not None and found[1] < current:
                    kp = kp.with_split(i, found[0])
                    current = found[1]
                    trajectory.append(current)
            if evaluate.failed > failed_before:
                skipped.append((sweeps, kind, i))
        if not current < start - search.rel_tol * abs(start):
            break
    return CDResult(
        penalty=kp,
        objective=current,
        trajectory=trajectory,
        evaluations=evaluate.log,
        sweeps=sweeps,
        skipped=skipped,
    )


def lasso_grid_search(objective, p, grid):
    """Evaluate constant penalties on ``grid``; return ``(best_value, best_objective, values)``."""
    values = []
    for v in grid:
        try:
            val = float(objective(np.full(p, v)))
        except (ArithmeticError, ValueError):
            val = math.nan
        values.append(val if np.isfinite(val) else math.inf)
    j = int(np.argmin(values))
    return float(grid[j]), values[j], values


def bh_sequence(p, q, scale=1.0):
    """Benjamini-Hochberg style penalty ``scale * Phi^{-1}(1 - i q / (2p))``, clipped at 0."""
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    i = np.arange(1, p + 1)
    return np.maximum(scale * stats.norm.ppf(1 - i * q / (2 * p)), 0.0)

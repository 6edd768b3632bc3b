"""Acceptance criteria 1-11.

Every test records one ``CRITERION n: PASS|FAIL`` line (printed and echoed in
the terminal summary).  The stochastic criteria run at full desk scale and take
most of the suite's wall-clock time.
"""

import math
import time
import warnings

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import monotone_cone_qp, projection_from_blocks, prox_enumeration
from slope_design import amp, cli
from slope_design.amp import (
    AmpConfig,
    DegenerateTauError,
    Prior,
    asymptotic_mse,
    mmse_denoiser,
    mmse_state_evolution,
    run_slope_amp,
    state_evolution_tau,
)
from slope_design.data import ExperimentSpec, load_csv, make_dataset
from slope_design.design import (
    PGDConfig,
    SearchConfig,
    compute_D,
    gradient_tau_alpha,
    pgd_design,
    project_on_S,
    tune_lasso_alpha,
)
from slope_design.experiments import (
    cv_objective,
    design_amp_thresholds,
    k_level_sweep,
    lambda_max,
    lasso_lambda_grid,
    run_amp_comparison,
)
from slope_design.solver import Dataset, SolverConfig, fit_slope
from slope_design.sorted_l1 import prox_sorted_l1

BERN = Prior.bernoulli(0.5)
GB = Prior.gauss_bernoulli(0.5)
GBIN = Prior.gaussian_binomial(5, 0.3)
SLACK = 0.01
ARMA_NOISE = 0.5

# CD runs logged by other criteria, re-checked by criterion 8
CD_RUNS = []


class Unattainable(Exception):
    """A criterion that cannot hold as stated; see the decision ledger."""


def record(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)


@pytest.fixture(autouse=True)
def quiet_solver():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


# -- 1 ----------------------------------------------------------------------

def test_criterion_01_prox_matches_brute_force():
    rng = np.random.default_rng(101)
    t0 = time.time()
    worst = 0.0
    for _ in range(500):
        p = int(rng.integers(1, 7))
        y = rng.normal(scale=rng.uniform(0.5, 4), size=p)
        if rng.random() < 0.2:  # exercise ties in |y|
            y[rng.integers(p)] = -y[0]
        theta = np.sort(rng.exponential(rng.uniform(0.2, 2), size=p))[::-1]
        worst = max(worst, np.max(np.abs(prox_sorted_l1(y, theta) - prox_enumeration(y, theta))))
    elapsed = time.time() - t0
    ok = worst <= 1e-6 and elapsed < 60
    record(1, ok, f"max abs error {worst:.2e} over 500 cases in {elapsed:.1f}s")
    assert ok


# -- 2 ----------------------------------------------------------------------

def test_criterion_02_projection_matches_qp():
    rng = np.random.default_rng(102)
    t0 = time.time()
    worst, bad = 0.0, 0
    for _ in range(1000):
        p = int(rng.integers(1, 9))
        g = rng.normal(scale=2, size=p) + rng.uniform(-1, 1)
        x = project_on_S(g)
        worst = max(worst, np.max(np.abs(x - monotone_cone_qp(g))))
        in_s = np.all(np.diff(x) <= 0) and np.all(x >= 0)
        idem = np.array_equal(project_on_S(x), x)
        blocks_ok = np.allclose(x, projection_from_blocks(g), rtol=0, atol=1e-12)
        bad += not (in_s and idem and blocks_ok)
    elapsed = time.time() - t0
    ok = worst <= 1e-8 and bad == 0 and elapsed < 60
    record(2, ok, f"max abs error {worst:.2e}, {bad} structural violations, {elapsed:.1f}s")
    assert ok


# -- 3 ----------------------------------------------------------------------

def fd_gradient(alpha, prior, cfg, h=1e-5):
    grad = np.empty(alpha.size)
    tau = state_evolution_tau(alpha, prior, cfg).tau
    for i in range(alpha.size):
        up, dn = alpha.copy(), alpha.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (state_evolution_tau(up, prior, cfg, tau0=tau).tau
                   - state_evolution_tau(dn, prior, cfg, tau0=tau).tau) / (2 * h)
    return grad


def test_criterion_03_gradient_and_D():
    errors = {}
    for p in (10, 50):
        for sigma_w in (0.0, 0.5):
            cfg = AmpConfig(delta=0.3, sigma_w=sigma_w, p=p, mc_samples=200, seed=p)
            # distinct values inside blocks keep the finite differences away from kinks
            alpha = np.linspace(2.6, 1.2, p)
            tau = state_evolution_tau(alpha, BERN, cfg).tau
            g = gradient_tau_alpha(alpha, tau, BERN, cfg)
            fd = fd_gradient(alpha, BERN, cfg)
            errors[(p, sigma_w)] = np.linalg.norm(g - fd) / np.linalg.norm(fd)
    rng = np.random.default_rng(103)
    negative = 0
    for _ in range(100):
        p = int(rng.integers(5, 60))
        cfg = AmpConfig(delta=rng.uniform(0.2, 0.8), sigma_w=rng.choice([0.0, 0.5]), p=p,
                        mc_samples=16, seed=int(rng.integers(1 << 30)))
        alpha = np.sort(rng.uniform(0.5, 3.0, p))[::-1]
        # D is evaluated at the state-evolution fixed point tau(alpha)
        tau = state_evolution_tau(alpha, BERN, cfg).tau
        negative += compute_D(alpha, tau, BERN, cfg) < 0
    worst = max(errors.values())
    ok = worst <= 0.05 and negative == 100
    record(3, ok, f"max relative gradient error {worst:.3%}; D < 0 in {negative}/100 trials")
    assert ok


# -- 4 ----------------------------------------------------------------------

@pytest.mark.xfail(raises=Unattainable, strict=True,
                   reason="tau(0) = sigma_w cannot hold when sigma_w > 0")
def test_criterion_04_state_evolution():
    # monotone after the first step, from both sides of the fixed point
    monotone = True
    for sigma_w in (0.0, 0.5):
        cfg = AmpConfig(delta=0.3, sigma_w=sigma_w, p=200, mc_samples=32)
        for alpha in (np.full(cfg.p, 1.5), np.linspace(3, 1, cfg.p)):
            for tau0 in (0.2, 5.0):
                h = np.diff(state_evolution_tau(alpha, BERN, cfg, tau0=tau0).history[1:])
                h = h[np.abs(h) > 1e-13]
                monotone &= bool(np.all(h <= 0) or np.all(h >= 0))
    # huge thresholds: tau^2 -> sigma_w^2 + E[Pi^2] / delta within 2 MC standard errors
    huge = True
    for sigma_w in (0.0, 0.5):
        cfg = AmpConfig(delta=0.3, sigma_w=sigma_w, p=500, mc_samples=64)
        tau = state_evolution_tau(np.full(cfg.p, 1e8), BERN, cfg).tau
        B, _ = amp.mc_draws(BERN, cfg)
        stderr = (np.sum(B**2, axis=1) / cfg.n).std(ddof=1) / math.sqrt(cfg.mc_samples)
        huge &= abs(tau**2 - (sigma_w**2 + BERN.second_moment() / cfg.delta)) <= 2 * stderr
    # zero thresholds: tau^2 = sigma_w^2 + tau^2 / delta
    noiseless = state_evolution_tau(np.zeros(50), BERN, AmpConfig(delta=0.3, p=50)).tau
    noisy = state_evolution_tau(np.zeros(50), BERN, AmpConfig(delta=2.0, sigma_w=0.5, p=50)).tau
    with pytest.raises(DegenerateTauError):
        state_evolution_tau(np.zeros(50), BERN, AmpConfig(delta=0.3, sigma_w=0.5, p=50))
    assert monotone and huge and noiseless == 0.0
    record(4, False,
           f"monotone: {monotone}, huge-threshold limit: {huge}, tau(0) = 0 at sigma_w = 0; "
           f"but at sigma_w = 0.5 tau(0) = {noisy:.4f} (delta = 2) or undefined (delta < 1), "
           "not sigma_w")
    raise Unattainable("tau(0) = sigma_w only at sigma_w = 0")


# -- 5 ----------------------------------------------------------------------

def test_criterion_05_pgd_beats_tuned_lasso():
    lasso, slope = [], []
    t0 = time.time()
    for seed in range(5):
        cfg = AmpConfig(delta=0.3, sigma_w=0.0, p=1000, seed=seed)
        res = pgd_design(BERN, cfg, PGDConfig())
        lasso.append(asymptotic_mse(res.tau_history[0], cfg))
        slope.append(asymptotic_mse(res.tau, cfg))
    lm, sm = float(np.mean(lasso)), float(np.mean(slope))
    ok = abs(lm - 0.473) <= 0.05 and abs(sm - 0.350) <= 0.05
    record(5, ok, f"tuned Lasso {lm:.4f} (target 0.473), PGD SLOPE {sm:.4f} (target 0.350), "
                  f"5 seeds, {(time.time() - t0) / 5:.0f}s per run")
    assert ok


# -- 6 ----------------------------------------------------------------------

def test_criterion_06_amp_consistency():
    cfg = AmpConfig(delta=0.3, sigma_w=0.0, p=1000)
    lasso_alpha, _ = tune_lasso_alpha(BERN, cfg)
    worst_mse, worst_fit = 0.0, 0.0
    for alpha in (np.full(cfg.p, lasso_alpha), np.linspace(2.2, 1.0, cfg.p)):
        predicted = asymptotic_mse(state_evolution_tau(alpha, BERN, cfg).tau, cfg)
        empirical = []
        for seed in range(5):
            ds = make_dataset(ExperimentSpec("gaussian_iid", n=300, p=1000, prior=BERN), seed)
            tr = run_slope_amp(ds, alpha, iters=100)
            empirical.append(tr.mse[-1])
            fit = fit_slope(ds, tr.lambda_, SolverConfig(rel_tolerance=1e-14, max_iters=50000))
            worst_fit = max(worst_fit,
                            np.linalg.norm(tr.beta - fit.beta) / np.linalg.norm(fit.beta))
        worst_mse = max(worst_mse, abs(np.mean(empirical) - predicted) / predicted)
    ok = worst_mse <= 0.10 and worst_fit <= 0.02
    record(6, ok, f"AMP MSE vs delta(tau^2 - sigma_w^2): worst relative gap {worst_mse:.2%} "
                  f"(5-seed mean); AMP fixed point vs solver: worst relative l2 {worst_fit:.1e}")
    assert ok


# -- 7 ----------------------------------------------------------------------

def test_criterion_07_amp_method_ordering():
    cfg = AmpConfig(delta=0.3, sigma_w=0.0, p=1000, seed=0)
    search = SearchConfig(magnitude_evals=16, grid_points=6, split_grid=16, max_sweeps=3,
                          upper_cap=10.0)
    alphas, predicted = design_amp_thresholds(GB, cfg, k_values=(1, 2, 3, 4, 5),
                                              pgd=PGDConfig(tol=1e-8), search=search)
    finals = {name: [] for name in [*alphas, "mmse"]}
    for seed in range(10):
        ds = make_dataset(ExperimentSpec("gaussian_iid", n=300, p=1000, prior=GB), 100 + seed)
        for name, tr in run_amp_comparison(ds, alphas, GB, cfg, iters=100).items():
            finals[name].append(tr.mse[-1])
    mean = {name: float(np.mean(v)) for name, v in finals.items()}
    chain = [mean["mmse"], mean["slope-pgd"], mean["slope-k2"], mean["lasso"]]
    ordered = all(a <= b + SLACK for a, b in zip(chain, chain[1:]))
    sweep = [mean[f"slope-k{k}"] for k in range(1, 6)]
    monotone_k = all(b <= a + SLACK for a, b in zip(sweep, sweep[1:]))
    ok = ordered and monotone_k
    shown = ", ".join(f"{k} {v:.4f}" for k, v in mean.items())
    record(7, ok, f"10-seed mean final MSE: {shown}; "
                  f"MMSE <= PGD <= 2-level <= Lasso: {ordered}; k-sweep non-increasing: "
                  f"{monotone_k} (predicted: "
                  + ", ".join(f"{k} {v:.4f}" for k, v in predicted.items()) + ")")
    assert ok


# -- 9 (its CD runs feed criterion 8) ---------------------------------------

def arma_sweep(n, p, seed, search, n_grid, lo_frac, warm_start=False, config=None):
    spec = ExperimentSpec("arma11", n=n, p=p, prior=GBIN, sigma_w=ARMA_NOISE, column_scale="unit")
    ds = make_dataset(spec, seed)
    objective = cv_objective(ds, 10, seed=seed, warm_start=warm_start, config=config)
    grid = lasso_lambda_grid(ds, n_grid, lo_frac)
    search.upper_cap = lambda_max(ds)
    return k_level_sweep(objective, p, grid, (2,), search)


def test_criterion_09_arma():
    summary = []
    ok = True
    settings = (
        # the Lasso grid spans six decades so the tuned baseline is not cut off
        (20, 50, dict(search=SearchConfig(), n_grid=60, lo_frac=1e-6)),
        # runtime: reduced search, warm starts and a looser solver budget
        (200, 500, dict(search=SearchConfig(magnitude_evals=6, grid_points=3,
                                            split_method="bisection", max_sweeps=1),
                        n_grid=15, lo_frac=1e-3, warm_start=True,
                        config=SolverConfig(max_iters=2000, rel_tolerance=1e-9))),
    )
    for n, p, kwargs in settings:
        wins, gains = 0, []
        for seed in range(10):
            sw = arma_sweep(n, p, seed, **kwargs)
            CD_RUNS.extend(sw.results.values())
            two = sw.results[2].objective
            wins += two <= sw.lasso_objective
            gains.append(1 - two / sw.lasso_objective)
        part_ok = wins >= 9 and (p != 50 or np.mean(gains) >= 0.10)
        ok &= part_ok
        summary.append(f"(n={n}, p={p}) 2-level <= Lasso in {wins}/10 seeds, "
                       f"mean relative improvement {np.mean(gains):.1%}")
    record(9, ok, "; ".join(summary))
    assert ok


# -- 8 ----------------------------------------------------------------------

def test_criterion_08_cd_contract():
    spec = ExperimentSpec("gaussian_iid", n=40, p=60, prior=Prior.bernoulli(0.3), sigma_w=0.5)
    ds = make_dataset(spec, 7)
    objective = cv_objective(ds, 10, seed=7)
    grid = lasso_lambda_grid(ds, 40, 1e-4)
    sw = k_level_sweep(objective, ds.p, grid, (1, 2, 3), SearchConfig(upper_cap=grid[-1]))
    runs = [*sw.results.values(), *CD_RUNS]
    monotone = all(np.all(np.diff(r.trajectory) <= 0) for r in runs)
    # k = 1 against a dense 1-D grid; tolerance is the dense grid's variation at its optimum
    dense = np.geomspace(grid[0], grid[-1], 200)
    curve = np.array([objective(np.full(ds.p, v)) for v in dense])
    j = int(np.argmin(curve))
    resolution = max(abs(curve[i] - curve[j]) for i in (j - 1, j + 1) if 0 <= i < dense.size)
    k1 = sw.results[1].objective
    matches = abs(k1 - curve[j]) <= resolution and k1 <= sw.lasso_objective
    nested = sw.results[2].objective <= k1 and sw.results[3].objective <= sw.results[2].objective
    ok = monotone and matches and nested
    record(8, ok, f"{len(runs)} logged CD runs non-increasing: {monotone}; k=1 CD {k1:.4f} vs "
                  f"dense grid {curve[j]:.4f} (resolution {resolution:.4f}): {matches}; "
                  f"k=1,2,3 objectives {k1:.4f}, {sw.results[2].objective:.4f}, "
                  f"{sw.results[3].objective:.4f}")
    assert ok


# -- 10 ---------------------------------------------------------------------

def test_criterion_10_mmse_closed_forms():
    s = np.linspace(-6, 6, 121)
    exact = all(
        np.array_equal(mmse_denoiser(s, tau, 0.0, sb), sb**2 / (sb**2 + tau**2) * s)
        for tau in (0.1, 0.7, 2.0) for sb in (0.5, 1.0, 3.0)
    )
    zero = all(np.all(mmse_denoiser(s, tau, 1.0) == 0) for tau in (0.1, 1.0, 4.0))
    worst = 0.0
    for delta in (0.3, 0.5, 2.0):
        for sigma_w in (0.1, 0.5):
            for sb in (0.5, 1.0, 2.0):
                cfg = AmpConfig(delta=delta, sigma_w=sigma_w)
                # tau^2 = s2 + sb2 tau^2 / (delta (sb2 + tau^2)), a quadratic in tau^2
                s2, v = sigma_w**2, sb**2
                b = v - s2 - v / delta
                tau2 = (-b + math.sqrt(b * b + 4 * s2 * v)) / 2
                got = mmse_state_evolution(Prior.gauss_bernoulli(1.0, sigma_b=sb), cfg).tau
                worst = max(worst, abs(got**2 - tau2))
    ok = exact and zero and worst <= 1e-3
    record(10, ok, f"e=0 linear shrinkage exact: {exact}; e=1 gives 0: {zero}; "
                   f"scalar fixed point max error {worst:.1e}")
    assert ok


# -- 11 ---------------------------------------------------------------------

def screening_fixture(path, seed=0, n=200, p=2000, planted=10):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    cols = rng.choice(p, planted, replace=False)
    score = X[:, cols] @ rng.choice([-1.0, 1.0], planted)
    y = (score + 0.5 * rng.normal(size=n) > 0).astype(float)
    names = [f"f{j}" for j in range(p)]
    np.savetxt(path, np.column_stack([X, y]), delimiter=",", fmt="%.6g",
               header=",".join([*names, "outcome"]), comments="")
    return {names[j] for j in cols}


def planted_logistic(seed, n=200, p=100, k=60, magnitude=0.5):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    beta = np.zeros(p)
    beta[:k] = magnitude * rng.choice([-1.0, 1.0], k)
    y = (rng.random(n) < 1 / (1 + np.exp(-X @ beta))).astype(float)
    return Dataset(X, y)


def test_criterion_11_real_data_protocol(tmp_path):
    csv_path = tmp_path / "screening.csv"
    planted = screening_fixture(csv_path)
    _, names = load_csv(csv_path, "outcome", screen_top_m=500, task="logistic")
    selected = planted <= set(names) and len(names) == 500
    cfg = tmp_path / "c.ini"
    cfg.write_text(f"""
[data]
csv = {csv_path}
response = outcome
screen_top_m = 500
task = logistic
folds = 5
[cd]
k = 2
magnitude_evals = 6
grid_points = 3
split_grid = 4
max_sweeps = 1
lasso_grid = 10
""")
    code = cli.main(["design-cd", "--config", str(cfg), "--out", str(tmp_path / "out")])
    summary = {}
    if code == 0:
        for line in (tmp_path / "out" / "cd_summary.csv").read_text().splitlines()[1:]:
            method, value = line.split(",")
            summary[method] = 1 - float(value)
    in_range = bool(summary) and all(0 <= a <= 1 for a in summary.values())
    wins = 0
    accs = []
    search = SearchConfig(magnitude_evals=12, grid_points=4, split_grid=8, max_sweeps=2)
    for seed in range(10):
        ds = planted_logistic(seed)
        grid = lasso_lambda_grid(ds, 20)
        search.upper_cap = float(grid[-1])
        sw = k_level_sweep(cv_objective(ds, 5, task="logistic", seed=seed), ds.p, grid, (2,),
                           search)
        lasso_acc, two_acc = 1 - sw.lasso_objective, 1 - sw.results[2].objective
        accs.append((lasso_acc, two_acc))
        wins += two_acc > lasso_acc
    ok = selected and code == 0 and in_range and wins >= 8
    la, ta = np.mean(accs, axis=0)
    record(11, ok, f"screening keeps all planted columns: {selected}; CSV pipeline exit {code}, "
                   f"accuracies {summary}; planted fixture: 2-level beats Lasso in {wins}/10 "
                   f"seeds (mean accuracy {ta:.3f} vs {la:.3f})")
    assert ok

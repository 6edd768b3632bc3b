import math

import numpy as np
import pytest

from slope_design import amp
from slope_design.amp import (
    AmpConfig,
    CalibrationError,
    DegenerateTauError,
    Prior,
    asymptotic_mse,
    calibrate_alpha_to_lambda,
    calibrate_lambda_to_alpha,
    mmse_denoiser,
    mmse_denoiser_derivative,
    mmse_risk,
    mmse_state_evolution,
    run_mmse_amp,
    run_slope_amp,
    state_evolution_tau,
)
from slope_design.data import ExperimentSpec, make_dataset
from slope_design.solver import SolverConfig, fit_slope

BERN = Prior.bernoulli(0.5)
GB = Prior.gauss_bernoulli(0.5)


# -- priors and configuration ------------------------------------------------

def test_prior_moments_against_sampling():
    rng = np.random.default_rng(0)
    b = BERN.sample(rng, 200_000)
    assert b.mean() == pytest.approx(0.5, abs=0.01)
    gbin = Prior.gaussian_binomial(5, 0.3)
    assert gbin.second_moment() == pytest.approx(3.3)
    assert np.mean(gbin.sample(rng, 400_000) ** 2) == pytest.approx(3.3, rel=0.02)
    assert GB.second_moment() == pytest.approx(0.5)


def test_prior_validation():
    with pytest.raises(ValueError):
        Prior("laplace")
    with pytest.raises(ValueError):
        Prior.bernoulli(1.5)
    with pytest.raises(ValueError):
        Prior.gauss_bernoulli(0.5, sigma_b=0)


def test_config_validation():
    with pytest.raises(ValueError):
        AmpConfig(delta=0)
    with pytest.raises(ValueError):
        AmpConfig(delta=0.5, sigma_w=-1)
    assert AmpConfig(delta=0.3, p=1000).n == pytest.approx(300)


def test_draws_are_common_random_numbers():
    cfg = AmpConfig(delta=0.3, p=50, mc_samples=4, seed=3)
    B1, Z1 = amp.mc_draws(BERN, cfg)
    B2, Z2 = amp._cached_draws.__wrapped__(BERN, 50, 4, 3)
    np.testing.assert_array_equal(B1, B2)
    np.testing.assert_array_equal(Z1, Z2)


# -- state evolution --------------------------------------------------------

@pytest.mark.parametrize("sigma_w", [0.0, 0.5])
def test_huge_threshold_limit(sigma_w):
    cfg = AmpConfig(delta=0.3, sigma_w=sigma_w, p=200, mc_samples=64)
    se = state_evolution_tau(np.full(cfg.p, 1e8), BERN, cfg)
    B, _ = amp.mc_draws(BERN, cfg)
    per_rep = np.sum(B**2, axis=1) / cfg.n
    expected = sigma_w**2 + BERN.second_moment() / cfg.delta
    stderr = per_rep.std(ddof=1) / math.sqrt(cfg.mc_samples)
    assert abs(se.tau**2 - expected) <= 2 * stderr


def test_zero_threshold_closed_form():
    assert state_evolution_tau(np.zeros(10), BERN, AmpConfig(delta=0.3, p=10)).tau == 0.0
    cfg = AmpConfig(delta=2.0, sigma_w=0.5, p=10)
    tau = state_evolution_tau(np.zeros(10), BERN, cfg).tau
    assert tau**2 == pytest.approx(cfg.sigma_w**2 + tau**2 / cfg.delta)
    with pytest.raises(DegenerateTauError):
        state_evolution_tau(np.zeros(10), BERN, AmpConfig(delta=0.3, sigma_w=0.5, p=10))


@pytest.mark.parametrize("sigma_w", [0.0, 0.5])
def test_state_evolution_is_monotone_after_first_step(sigma_w):
    cfg = AmpConfig(delta=0.3, sigma_w=sigma_w, p=100, mc_samples=32)
    for tau0 in (0.3, 5.0):
        h = np.diff(state_evolution_tau(np.full(cfg.p, 1.5), BERN, cfg, tau0=tau0).history[1:])
        h = h[np.abs(h) > 1e-13]
        assert np.all(h <= 0) or np.all(h >= 0)


def test_state_evolution_converges_to_a_fixed_point():
    cfg = AmpConfig(delta=0.5, sigma_w=0.2, p=100, mc_samples=16)
    alpha = np.linspace(2.5, 0.5, cfg.p)
    se = state_evolution_tau(alpha, BERN, cfg)
    B, Z = amp.mc_draws(BERN, cfg)
    assert se.converged
    assert amp._se_map(alpha, se.tau, B, Z, cfg)[0] == pytest.approx(se.tau, abs=1e-9)


def test_state_evolution_degenerate():
    cfg = AmpConfig(delta=0.3, p=10)
    with pytest.raises(DegenerateTauError):
        state_evolution_tau(np.ones(10), Prior.bernoulli(0.0), cfg)


def test_asymptotic_mse():
    cfg = AmpConfig(delta=0.3, sigma_w=0.5)
    assert asymptotic_mse(1.0, cfg) == pytest.approx(0.3 * 0.75)
    with pytest.raises(ValueError):
        asymptotic_mse(0.1, cfg)


def test_tau_for_reported_slope_mse():
    # tau implied by an asymptotic MSE of 0.35 at delta = 0.3, noiseless
    assert math.sqrt(0.35 / 0.3) == pytest.approx(1.080, abs=1e-3)


# -- calibration ------------------------------------------------------------

def test_calibration_is_parallel_and_round_trips():
    cfg = AmpConfig(delta=0.3, p=200, mc_samples=32)
    alpha = np.linspace(3.0, 1.0, cfg.p)
    tau = state_evolution_tau(alpha, BERN, cfg).tau
    lam = calibrate_alpha_to_lambda(alpha, tau, BERN, cfg)
    ratio = lam / alpha
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-12)
    back = calibrate_lambda_to_alpha(lam, BERN, cfg)
    np.testing.assert_allclose(back, alpha, rtol=amp.CALIBRATION_RTOL)


def test_calibration_outside_domain():
    cfg = AmpConfig(delta=0.3, p=100, mc_samples=8)
    with pytest.raises(CalibrationError):
        calibrate_alpha_to_lambda(np.full(cfg.p, 1e-3), 1.0, BERN, cfg)


def test_calibration_zero_penalty():
    cfg = AmpConfig(delta=0.3, p=10, mc_samples=4)
    np.testing.assert_array_equal(calibrate_lambda_to_alpha(np.zeros(10), BERN, cfg), 0)


# -- SLOPE AMP --------------------------------------------------------------

def amp_dataset(p=500, delta=0.3, sigma_w=0.0, prior=BERN, seed=0):
    spec = ExperimentSpec("gaussian_iid", n=int(delta * p), p=p, prior=prior, sigma_w=sigma_w)
    return make_dataset(spec, seed)


def test_amp_with_huge_threshold_returns_zero():
    ds = amp_dataset()
    tr = run_slope_amp(ds, np.full(ds.p, 1e8), iters=5)
    np.testing.assert_array_equal(tr.beta, 0)
    assert tr.mse[-1] == pytest.approx(np.mean(ds.beta_true**2))


def test_amp_mse_tracks_state_evolution():
    ds = amp_dataset(p=1000, seed=1)
    cfg = AmpConfig(delta=0.3, p=1000, mc_samples=32)
    alpha = np.full(ds.p, 1.7)
    tau = state_evolution_tau(alpha, BERN, cfg).tau
    tr = run_slope_amp(ds, alpha, iters=60)
    assert tr.mse[-1] == pytest.approx(asymptotic_mse(tau, cfg), rel=0.1)


def test_amp_fixed_point_solves_slope():
    ds = amp_dataset(p=400, delta=0.5, sigma_w=0.1, seed=2)
    alpha = np.linspace(2.5, 1.0, ds.p)
    tr = run_slope_amp(ds, alpha, iters=300)
    fit = fit_slope(ds, tr.lambda_, SolverConfig(rel_tolerance=1e-14, max_iters=20000))
    rel = np.linalg.norm(tr.beta - fit.beta) / np.linalg.norm(fit.beta)
    assert rel < 0.02


def test_amp_se_tau_mode_needs_prior():
    ds = amp_dataset(p=100)
    with pytest.raises(ValueError, match="prior"):
        run_slope_amp(ds, np.ones(ds.p), tau_mode="se")


def test_amp_from_lambda():
    ds = amp_dataset(p=300)
    cfg = AmpConfig(delta=0.3, p=300, mc_samples=16)
    alpha = np.full(ds.p, 2.0)
    tau = state_evolution_tau(alpha, BERN, cfg).tau
    lam = calibrate_alpha_to_lambda(alpha, tau, BERN, cfg)
    a = run_slope_amp(ds, lam=lam, prior=BERN, cfg=cfg, iters=30)
    assert np.isfinite(a.mse[-1])
    assert not a.diverged


# -- MMSE denoiser ------------------------------------------------------------

def test_mmse_gaussian_prior_reduces_to_linear_shrinkage():
    s = np.linspace(-5, 5, 41)
    tau, sb = 0.7, 1.3
    np.testing.assert_array_equal(mmse_denoiser(s, tau, 0.0, sb), sb**2 / (sb**2 + tau**2) * s)


def test_mmse_all_zero_prior_gives_zero():
    np.testing.assert_array_equal(mmse_denoiser(np.linspace(-3, 3, 7), 1.0, 1.0), 0)


def test_mmse_posterior_mean_by_quadrature():
    from scipy import integrate, stats

    e, tau, s = 0.4, 0.8, 1.1
    w_zero = e * stats.norm.pdf(s, scale=tau)
    num = integrate.quad(lambda b: b * stats.norm.pdf(b) * stats.norm.pdf(s - b, scale=tau), -12, 12)[0]
    den = integrate.quad(lambda b: stats.norm.pdf(b) * stats.norm.pdf(s - b, scale=tau), -12, 12)[0]
    expected = (1 - e) * num / (w_zero + (1 - e) * den)
    assert mmse_denoiser(s, tau, e) == pytest.approx(expected, rel=1e-8)


def test_mmse_derivative_matches_finite_differences():
    s = np.linspace(-4, 4, 33)
    h = 1e-6
    fd = (mmse_denoiser(s + h, 0.6, 0.3) - mmse_denoiser(s - h, 0.6, 0.3)) / (2 * h)
    np.testing.assert_allclose(mmse_denoiser_derivative(s, 0.6, 0.3), fd, atol=1e-6)


def test_mmse_risk_against_monte_carlo():
    rng = np.random.default_rng(0)
    b = GB.sample(rng, 400_000)
    s = b + 0.9 * rng.standard_normal(b.size)
    mc = np.mean((mmse_denoiser(s, 0.9, 0.5) - b) ** 2)
    assert mmse_risk(0.9, GB) == pytest.approx(mc, rel=0.02)


def test_mmse_state_evolution_gaussian_fixed_point():
    prior = Prior.gauss_bernoulli(1.0, sigma_b=1.0)
    cfg = AmpConfig(delta=0.3, sigma_w=0.5)
    sb2, s2 = 1.0, cfg.sigma_w**2
    b = sb2 - s2 - sb2 / cfg.delta
    tau2 = (-b + math.sqrt(b * b + 4 * s2 * sb2)) / 2
    assert mmse_state_evolution(prior, cfg).tau ** 2 == pytest.approx(tau2, abs=1e-3)


def test_mmse_needs_gauss_bernoulli():
    with pytest.raises(ValueError):
        mmse_risk(1.0, BERN)


def test_mmse_amp_beats_lasso_amp():
    ds = amp_dataset(p=1000, prior=GB, seed=3)
    cfg = AmpConfig(delta=0.3, p=1000)
    mmse = run_mmse_amp(ds, GB, iters=50, cfg=cfg)
    lasso = run_slope_amp(ds, np.full(ds.p, 1.5), iters=50)
    assert not mmse.diverged
    assert mmse.mse[-1] <= lasso.mse[-1] + 0.01

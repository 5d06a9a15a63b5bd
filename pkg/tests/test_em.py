"""E-step statistics and the closed-form M-step updates.

Stationarity of each update is checked against central finite
differences of an independently assembled expected complete-data
deviance (tests/_oracles.q_deviance), never against the package's own
accumulator algebra.
"""

from dataclasses import replace

import numpy as np
import pytest

from fieldcal import (
    DataError,
    Dataset,
    ModelParams,
    StationSet,
    e_step,
    fit,
    init_params,
    run_filter,
    update_alpha,
    update_beta,
    update_g,
    update_sigma2,
    update_theta,
)
from fieldcal.em import FitConfig
from fieldcal.simulate import center_bias_scenario, generate, grid_stations

from _oracles import joint_smoothed, q_deviance, random_instance


def _scaled_grad(qfun, x0, h_scale=1e-5):
    h = h_scale * (1.0 + abs(x0))
    grad = (qfun(x0 + h) - qfun(x0 - h)) / (2.0 * h)
    return abs(grad) * (1.0 + abs(x0))


# ---------------------------------------------------------------- init

def test_init_defaults_without_covariates():
    rng = np.random.default_rng(0)
    d, _ = random_instance(rng, n=5, T=30)
    p0 = init_params(d)
    assert p0.beta.shape == (0,)
    np.testing.assert_array_equal(p0.alpha, np.full(5, 0.5))
    assert (p0.sigma2, p0.g, p0.theta) == (0.1, 0.2, 100.0)
    np.testing.assert_array_equal(p0.mu0, np.zeros(5))
    # stationary prior at the initial (g, theta)
    from fieldcal.kalman import sigma_eta_for
    np.testing.assert_allclose(p0.Sigma0,
                               sigma_eta_for(d, 100.0) / (1 - 0.04), atol=1e-12)


def test_init_ols_perfect_single_column():
    st = grid_stations(2, 2)
    rng = np.random.default_rng(1)
    y = rng.normal(size=(4, 20))
    X = np.stack([y.T[:, :, None]])[0]  # column equal to y
    d = Dataset.from_arrays(st, y, X=X)
    p0 = init_params(d)
    assert p0.beta[0] == pytest.approx(1.0, abs=1e-10)


def test_init_ols_matches_normal_equations():
    rng = np.random.default_rng(2)
    d, _ = random_instance(rng, n=9, T=100, k=3, missing=0.1)
    p0 = init_params(d)
    rows = np.vstack([d.X[t][d.observed[:, t]] for t in range(d.T)])
    resp = np.concatenate([d.y[d.observed[:, t], t] for t in range(d.T)])
    ref = np.linalg.solve(rows.T @ rows, rows.T @ resp)
    np.testing.assert_allclose(p0.beta, ref, atol=1e-10)


def test_init_rank_deficient_lists_columns():
    st = grid_stations(2, 2)
    rng = np.random.default_rng(3)
    base = rng.normal(size=(20, 4, 1))
    X = np.concatenate([base, 2.0 * base], axis=2)  # col 1 = 2 * col 0
    d = Dataset.from_arrays(st, rng.normal(size=(4, 20)), X=X)
    with pytest.raises(DataError, match=r"collinear.*\[0, 1\]"):
        init_params(d)


# ---------------------------------------------------------------- e-step

def test_estep_scalar_hand_computed():
    # T=1, n=1, mu0=0, Sigma0=1: predicted var v = g^2 + 1, and
    #   zhat = v a y / (a^2 v + s2),  Phat = v - v^2 a^2 / (a^2 v + s2)
    #   lag-one = g * s2 / (a^2 v + s2) (prior Cov(z0, z1) = g shrunk by data)
    a, s2, g, y1 = 0.8, 0.3, 0.5, 1.7
    st = StationSet(ids=("a",), coords=np.zeros((1, 2)))
    d = Dataset.from_arrays(st, np.array([[y1]]))
    p = ModelParams(beta=np.zeros(0), alpha=np.array([a]), sigma2=s2, g=g,
                    theta=1.0, mu0=np.zeros(1), Sigma0=np.eye(1))
    stats, _ = e_step(d, p)
    v = g * g + 1.0
    denom = a * a * v + s2
    zhat = v * a * y1 / denom
    Phat = v - v * v * a * a / denom
    np.testing.assert_allclose(stats.S11, [[zhat**2 + Phat]], atol=1e-12)
    # S00 uses the smoothed z0 moment: z0 | y1 has mean g a y1 / denom
    # and variance 1 - a^2 g^2 / denom
    z0hat = g * a * y1 / denom
    P0hat = 1.0 - a * a * g * g / denom
    np.testing.assert_allclose(stats.S00, [[z0hat**2 + P0hat]], atol=1e-12)
    lag = g * s2 / denom
    np.testing.assert_allclose(stats.S10, [[zhat * z0hat + lag]], atol=1e-12)


def test_estep_matches_joint_posterior_moments():
    rng = np.random.default_rng(4)
    for trial in range(3):
        d, p = random_instance(rng, n=3, T=10, k=trial % 2,
                               missing=0.15 if trial else 0.0)
        stats, _ = e_step(d, p)
        z_hat, P_hat, P_lag = joint_smoothed(d, p)
        T = d.T
        S00 = z_hat[:T].T @ z_hat[:T] + P_hat[:T].sum(axis=0)
        S11 = z_hat[1:].T @ z_hat[1:] + P_hat[1:].sum(axis=0)
        S10 = z_hat[1:].T @ z_hat[:T] + P_lag.sum(axis=0)
        np.testing.assert_allclose(stats.S00, S00, atol=1e-8)
        np.testing.assert_allclose(stats.S11, S11, atol=1e-8)
        np.testing.assert_allclose(stats.S10, S10, atol=1e-8)


def test_estep_s10_centers_on_zero_when_g_zero():
    # with g = 0 the latent steps are independent; E[S10] = 0
    rng = np.random.default_rng(5)
    n, T, reps = 3, 10, 500
    st = StationSet(ids=("a", "b", "c"), coords=rng.uniform(0, 2, (n, 2)))
    from fieldcal.kalman import sigma_eta_for
    Seta = sigma_eta_for(Dataset.from_arrays(st, np.zeros((n, T))), 1.5)
    L = np.linalg.cholesky(Seta)
    p = ModelParams(beta=np.zeros(0), alpha=np.full(n, 0.9), sigma2=0.2,
                    g=0.0, theta=1.5, mu0=np.zeros(n), Sigma0=Seta)
    draws = np.empty((reps, n, n))
    for r in range(reps):
        z = L @ rng.normal(size=(n, T))
        y = p.alpha[:, None] * z + np.sqrt(p.sigma2) * rng.normal(size=(n, T))
        stats, _ = e_step(Dataset.from_arrays(st, y), p)
        draws[r] = stats.S10
    mean = draws.mean(axis=0)
    mc_sd = draws.std(axis=0, ddof=1) / np.sqrt(reps)
    assert np.all(np.abs(mean) < 3.0 * mc_sd + 1e-12)


def test_omega_sum_consistent_with_sigma2_update():
    # two routes to the same quantity: the packaged accumulators and the
    # literal Omega_t assembly at the E-step parameters
    rng = np.random.default_rng(6)
    d, p = random_instance(rng, n=4, T=25, k=2, missing=0.2)
    stats, _ = e_step(d, p)
    assert update_sigma2(stats, d, p) == pytest.approx(
        np.trace(stats.omega_sum) / stats.m_total, abs=1e-12)


# ---------------------------------------------------------------- updates

def test_alpha_unity_under_perfect_proportionality():
    # craft stats with z|T = y - X beta and P|T = 0: ratio is exactly 1
    rng = np.random.default_rng(7)
    d, p = random_instance(rng, n=3, T=12, k=1)
    stats, _ = e_step(d, p)
    fitted = np.stack([d.X[t] @ p.beta for t in range(d.T)]).T
    Zt = d.y - fitted
    crafted = replace(
        stats,
        zy=(Zt * d.y).sum(axis=1),
        W=np.einsum("tnk,nt->nk", d.X_stacked, Zt),
        den=(Zt * Zt).sum(axis=1),
    )
    np.testing.assert_allclose(update_alpha(crafted, d, p), np.ones(3),
                               atol=1e-10)


def test_alpha_scales_linearly_with_y():
    rng = np.random.default_rng(8)
    d, p = random_instance(rng, n=3, T=15)
    stats, _ = e_step(d, p)
    base = update_alpha(stats, d, p)
    c = 2.5
    scaled = replace(stats, zy=stats.zy * np.array([c, 1.0, 1.0]))
    out = update_alpha(scaled, d, p)
    assert out[0] == pytest.approx(c * base[0], rel=1e-12)
    np.testing.assert_allclose(out[1:], base[1:], rtol=1e-12)


def test_alpha_is_q_argmax():
    from scipy.optimize import minimize_scalar
    rng = np.random.default_rng(9)
    d, p = random_instance(rng, n=3, T=20, k=1, missing=0.1)
    stats, _ = e_step(d, p)
    a_new = update_alpha(stats, d, p)
    for s in range(3):
        def q_of(x, s=s):
            a = a_new.copy()
            a[s] = x
            return q_deviance(stats, d, replace(p, alpha=a))
        res = minimize_scalar(q_of, bounds=(a_new[s] - 0.5, a_new[s] + 0.5),
                              method="bounded",
                              options={"xatol": 1e-10})
        assert abs(res.x - a_new[s]) < 1e-6


def test_beta_reduces_to_pooled_ols_when_alpha_zero():
    rng = np.random.default_rng(10)
    d, p = random_instance(rng, n=4, T=30, k=2, missing=0.1)
    stats, _ = e_step(d, p)
    pz = replace(p, alpha=np.zeros(4))
    beta = update_beta(stats, d, pz)
    rows = np.vstack([d.X[t][d.observed[:, t]] for t in range(d.T)])
    resp = np.concatenate([d.y[d.observed[:, t], t] for t in range(d.T)])
    ref = np.linalg.solve(rows.T @ rows, rows.T @ resp)
    np.testing.assert_allclose(beta, ref, atol=1e-10)


def test_beta_empty_without_covariates():
    rng = np.random.default_rng(11)
    d, p = random_instance(rng, n=3, T=10)
    stats, _ = e_step(d, p)
    assert update_beta(stats, d, p).shape == (0,)


def test_updates_are_q_stationary():
    rng = np.random.default_rng(12)
    d, p = random_instance(rng, n=4, T=25, k=2, missing=0.15)
    stats, qref = e_step(d, p)
    qscale = 1.0 + abs(q_deviance(stats, d, p))

    a_new = update_alpha(stats, d, p)
    for s in range(4):
        def q_a(x, s=s):
            a = a_new.copy()
            a[s] = x
            return q_deviance(stats, d, replace(p, alpha=a))
        assert _scaled_grad(q_a, a_new[s]) / qscale < 1e-5

    b_new = update_beta(stats, d, p)
    for j in range(2):
        def q_b(x, j=j):
            b = b_new.copy()
            b[j] = x
            return q_deviance(stats, d, replace(p, beta=b))
        assert _scaled_grad(q_b, b_new[j]) / qscale < 1e-5

    s2_new = update_sigma2(stats, d, p)
    def q_s2(x):
        return q_deviance(stats, d, replace(p, sigma2=x))
    assert _scaled_grad(q_s2, s2_new) / qscale < 1e-5

    g_new = update_g(stats, p)
    def q_g(x):
        return q_deviance(stats, d, replace(p, g=x))
    assert _scaled_grad(q_g, g_new) / qscale < 1e-5


def test_sigma2_trace_arithmetic():
    # y constant 1, alpha = 0, no covariates: expected residual square is
    # exactly 1 per observed cell
    st = grid_stations(2, 2)
    d = Dataset.from_arrays(st, np.ones((4, 6)))
    p = ModelParams(beta=np.zeros(0), alpha=np.zeros(4), sigma2=1.0, g=0.2,
                    theta=1.0, mu0=np.zeros(4), Sigma0=np.eye(4))
    stats, _ = e_step(d, p)
    assert update_sigma2(stats, d, p) == pytest.approx(1.0, abs=1e-12)


def test_sigma2_degenerate_floor():
    rng = np.random.default_rng(13)
    d, p = random_instance(rng, n=3, T=10)
    stats, _ = e_step(d, p)
    zeroed = replace(stats, yy=0.0, zy=np.zeros(3), den=np.zeros(3))
    with pytest.warns(RuntimeWarning):
        out = update_sigma2(zeroed, d, replace(p, alpha=np.zeros(3)))
    assert out == 1e-12


def test_g_ratio_identities():
    rng = np.random.default_rng(14)
    d, p = random_instance(rng, n=3, T=15)
    stats, _ = e_step(d, p)
    assert update_g(replace(stats, S10=np.zeros((3, 3))), p) == 0.0
    c = 0.7
    assert update_g(replace(stats, S10=c * stats.S00), p) == pytest.approx(
        c, rel=1e-12)


def test_alpha_zero_denominator_names_station():
    from fieldcal import NumericalError
    rng = np.random.default_rng(21)
    d, p = random_instance(rng, n=3, T=10)
    stats, _ = e_step(d, p)
    dead = replace(stats, den=np.array([1.0, 0.0, 1.0]))
    with pytest.raises(NumericalError, match="st1"):
        update_alpha(dead, d, p)


def test_g_nonpositive_denominator_rejected():
    from fieldcal import NumericalError
    rng = np.random.default_rng(22)
    d, p = random_instance(rng, n=3, T=10)
    stats, _ = e_step(d, p)
    with pytest.raises(NumericalError):
        update_g(replace(stats, S00=-np.eye(3)), p)


def test_theta_nonfinite_objective_rejected():
    from fieldcal import NumericalError
    rng = np.random.default_rng(23)
    d, p = random_instance(rng, n=3, T=10)
    stats, _ = e_step(d, p)
    poisoned = replace(stats, S11=np.full((3, 3), np.nan))
    with pytest.raises(NumericalError):
        update_theta(poisoned, p)


def test_theta_unidentified_single_station_keeps_incumbent():
    rng = np.random.default_rng(15)
    d, p = random_instance(rng, n=1, T=12)
    stats, _ = e_step(d, p)
    assert update_theta(stats, p) == p.theta


def test_theta_beats_log_grid():
    rng = np.random.default_rng(16)
    from fieldcal._fastpath import theta_objective_value
    for trial in range(3):
        d, p = random_instance(rng, n=4, T=30)
        stats, _ = e_step(d, p)
        th = update_theta(stats, p)
        M = stats.S11 - p.g * (stats.S10 + stats.S10.T) + p.g**2 * stats.S00
        best = theta_objective_value(stats.dist, M, stats.n_steps, th)
        for x in np.logspace(-2, 4, 200):
            assert best <= theta_objective_value(stats.dist, M,
                                                 stats.n_steps, x) + 1e-6


def test_theta_recovers_generative_range():
    # E-step at the generative truth on the unit 3x3 grid: the minimizer
    # lands inside the replication band 95 +- 10 seen in recovery runs
    cfg = center_bias_scenario(T=500, n_reps=1, seed=5)
    d = generate(cfg, 0)
    truth = ModelParams(
        beta=np.zeros(0), alpha=cfg.alpha, sigma2=cfg.sigma**2, g=cfg.g,
        theta=cfg.theta, mu0=np.zeros(9),
        Sigma0=np.exp(-_grid_dist() / cfg.theta) / (1 - cfg.g**2))
    stats, _ = e_step(d, truth)
    th = update_theta(stats, truth)
    assert 85.0 <= th <= 105.0


def _grid_dist():
    coords = grid_stations(3, 3).coords
    diff = coords[:, None] - coords[None, :]
    return np.sqrt((diff ** 2).sum(-1))


# ---------------------------------------------------------------- fit

def test_fit_self_consistent_from_truth():
    cfg = center_bias_scenario(T=500, n_reps=1, seed=21)
    d = generate(cfg, 0)
    truth = ModelParams(
        beta=np.zeros(0), alpha=cfg.alpha, sigma2=cfg.sigma**2, g=cfg.g,
        theta=cfg.theta, mu0=np.zeros(9),
        Sigma0=np.exp(-_grid_dist() / cfg.theta) / (1 - cfg.g**2))
    res = fit(d, FitConfig(max_iter=40), init=truth)
    assert abs(res.loglik_trace[1] - res.loglik_trace[0]) < \
        0.01 * abs(res.loglik_trace[0])
    # stays within 3 replication-sd of the truth (T=500 scale)
    assert abs(res.params.alpha[4] - 0.5) < 3 * 0.018
    assert abs(res.params.g - 0.5) < 3 * 0.017
    assert abs(np.sqrt(res.params.sigma2) - 0.1) < 3 * 0.002


def test_fit_monotone_loglik_small_instances():
    rng = np.random.default_rng(17)
    for _ in range(8):
        n = int(rng.integers(3, 7))
        T = int(rng.integers(20, 61))
        d, _ = random_instance(rng, n=n, T=T, k=int(rng.integers(0, 2)),
                               missing=0.1)
        res = fit(d, FitConfig(max_iter=30))
        diffs = np.diff(res.loglik_trace)
        assert diffs.min() > -1e-8 * max(1.0, np.abs(res.loglik_trace).max())


def test_fit_micro_instance_is_marginal_stationary_point():
    # tiny n=1 instance run to a tight fixed point: the closed-form
    # updates must jointly zero the marginal score (EM self-consistency)
    rng = np.random.default_rng(18)
    d, _ = random_instance(rng, n=1, T=25, k=1)
    res = fit(d, FitConfig(max_iter=60000, param_tol=1e-12, loglik_tol=1e-13))
    assert res.converged
    p = res.params
    from fieldcal import ParamIndexMap
    pm = ParamIndexMap.for_dataset(d)
    base = pm.to_vector(p)
    ll0 = run_filter(d, p).loglik
    for name in ("beta[0]", "alpha[st0]", "sigma2", "g"):
        i = pm.index(name)
        h = 1e-5 * (1.0 + abs(base[i]))
        hi = run_filter(d, pm.with_value(p, i, base[i] + h)).loglik
        lo = run_filter(d, pm.with_value(p, i, base[i] - h)).loglik
        grad = (hi - lo) / (2.0 * h)
        assert abs(grad) < 1e-4 * max(1.0, abs(ll0)), (name, grad)


def test_fit_sign_symmetry_and_canonicalization():
    rng = np.random.default_rng(19)
    d, p = random_instance(rng, n=3, T=20)
    flipped = replace(p, alpha=-p.alpha)
    assert abs(run_filter(d, p).loglik - run_filter(d, flipped).loglik) < 1e-10
    res = fit(d, FitConfig(max_iter=25), init=flipped)
    assert res.params.alpha.mean() >= 0.0


def test_fit_permutation_equivariance():
    rng = np.random.default_rng(20)
    d, _ = random_instance(rng, n=4, T=30, missing=0.1)
    perm = rng.permutation(4)
    d2 = Dataset.from_arrays(d.stations.subset(perm), d.y[perm],
                             observed=d.observed[perm])
    cfg = FitConfig(max_iter=25)
    r1, r2 = fit(d, cfg), fit(d2, cfg)
    np.testing.assert_allclose(r2.params.alpha, r1.params.alpha[perm],
                               atol=1e-8)
    for attr in ("sigma2", "g", "theta"):
        assert getattr(r1.params, attr) == pytest.approx(
            getattr(r2.params, attr), abs=1e-8)

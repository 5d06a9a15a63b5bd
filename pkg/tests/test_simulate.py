"""Generator determinism, distributional checks, recovery aggregation."""

import numpy as np
import pytest

from fieldcal import (
    DataError,
    FitConfig,
    ScenarioConfig,
    center_bias_scenario,
    corner_bias_scenario,
    generate,
    grid_stations,
    run_recovery,
)
from fieldcal.kalman import sigma_eta_for


def test_scenario_configs_carry_study_settings():
    cfg = center_bias_scenario(T=100)
    assert cfg.grid == (3, 3) and cfg.T == 100 and cfg.spacing == 1.0
    assert cfg.g == 0.5 and cfg.theta == 100.0 and cfg.sigma == 0.1
    expect = np.full(9, 0.8)
    expect[4] = 0.5  # the center of the row-major 3x3 grid
    np.testing.assert_array_equal(cfg.alpha, expect)

    cfg2 = corner_bias_scenario(T=100)
    expect2 = np.full(9, 0.8)
    expect2[2] = 0.5  # corner site s3
    np.testing.assert_array_equal(cfg2.alpha, expect2)


def test_generate_is_deterministic():
    cfg = center_bias_scenario(T=40, n_reps=3, seed=123)
    a = generate(cfg, 1)
    b = generate(cfg, 1)
    np.testing.assert_array_equal(a.y, b.y)
    c = generate(cfg, 2)
    assert np.any(c.y != a.y)


def test_noise_free_series_has_ar1_autocorrelation():
    cfg = ScenarioConfig(grid=(2, 2), T=10_000, alpha=np.ones(4), g=0.6,
                         theta=1.0, sigma=0.0, seed=5)
    d = generate(cfg, 0)
    for s in range(4):
        z = d.y[s]
        r1 = np.corrcoef(z[1:], z[:-1])[0, 1]
        assert r1 == pytest.approx(0.6, abs=0.03)


def test_innovation_covariance_recovered_from_increments():
    # sigma = 0, alpha = 1 exposes z; eta_t = z_t - g z_{t-1} must have
    # covariance Sigma_eta entrywise within 3 MC standard errors
    cfg = ScenarioConfig(grid=(3, 3), T=100_000, alpha=np.ones(9), g=0.5,
                         theta=2.0, sigma=0.0, seed=9)
    d = generate(cfg, 0)
    eta = d.y[:, 1:] - cfg.g * d.y[:, :-1]
    emp = eta @ eta.T / eta.shape[1]
    Seta = sigma_eta_for(d, cfg.theta)
    # moment of a Gaussian product: Var(eta_i eta_j) = 1 + Seta_ij^2
    mc_se = np.sqrt((1.0 + Seta**2) / eta.shape[1])
    assert np.all(np.abs(emp - Seta) < 3.0 * mc_se + 3e-3)


def test_cross_station_correlation_approaches_field_correlation():
    cfg = ScenarioConfig(grid=(2, 2), T=50_000, alpha=np.full(4, 0.7), g=0.4,
                         theta=1.5, sigma=0.0, seed=13)
    d = generate(cfg, 0)
    corr = np.corrcoef(d.y)
    Seta = sigma_eta_for(d, cfg.theta)
    assert np.abs(corr - Seta).max() < 0.02


def test_grid_layout_row_major():
    st = grid_stations(3, 3, spacing=2.0)
    np.testing.assert_array_equal(st.coords[0], [0.0, 0.0])
    np.testing.assert_array_equal(st.coords[2], [4.0, 0.0])
    np.testing.assert_array_equal(st.coords[4], [2.0, 2.0])  # center
    np.testing.assert_array_equal(st.coords[8], [4.0, 4.0])


def test_recovery_report_shape_and_determinism():
    cfg = center_bias_scenario(T=60, n_reps=4, seed=31)
    fitcfg = FitConfig(max_iter=15)
    r1 = run_recovery(cfg, fitcfg, n_jobs=1)
    r2 = run_recovery(cfg, fitcfg, n_jobs=2)
    np.testing.assert_array_equal(r1.estimates, r2.estimates)
    assert r1.param_names == tuple(
        [f"alpha[s{i}]" for i in range(1, 10)] + ["g", "theta", "sigma"])
    assert r1.estimates.shape == (4, 12)
    assert np.all(r1.lb <= r1.mean) and np.all(r1.mean <= r1.ub)
    assert not r1.failures
    assert len(r1.rep_order) + len(r1.failures) == cfg.n_reps


def test_recovery_single_replicate_flags_undefined_sd():
    cfg = center_bias_scenario(T=50, n_reps=1, seed=7)
    rep = run_recovery(cfg, FitConfig(max_iter=10))
    assert np.all(np.isnan(rep.sd))
    np.testing.assert_array_equal(rep.mean, rep.estimates[0])


def test_zero_replicates_rejected():
    with pytest.raises(DataError, match="positive|replicate"):
        cfg = center_bias_scenario(T=50, n_reps=0)
        run_recovery(cfg)


def test_config_validation():
    with pytest.raises(DataError):
        ScenarioConfig(grid=(3, 3), T=10, alpha=np.ones(5), g=0.5,
                       theta=1.0, sigma=0.1)
    with pytest.raises(DataError):
        ScenarioConfig(grid=(3, 3), T=10, alpha=np.ones(9), g=1.1,
                       theta=1.0, sigma=0.1)

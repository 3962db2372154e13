"""Simulation harness: designs, draws, disturbances, experiment driver."""

import numpy as np
import numpy.testing as npt
import pytest
from scipy import stats

from rtpr.errors import InputError
from rtpr.estimate import FitOptions
from rtpr.kernel import gram_matrix
from rtpr.model import make_config
from rtpr.simulate import (DISTURB_CONSTANT, DISTURB_NONE, DISTURB_RANDOM_T2,
                           ERROR_ETP, ERROR_GAUSSIAN, SimConfig, inject_disturbance,
                           make_design, mse, run_experiment, sample_errors,
                           sample_truth, simulate_batch)


def _small_scenario(**kw):
    base = dict(I=1, J=3, n_train=8, grid_size=24, phi_truth=0.2,
                disturbance=DISTURB_CONSTANT, gamma=2.0, disturbed_curve=3,
                reps=2, seed=12)
    base.update(kw)
    return SimConfig(**base)


# ---------------------------------------------------------------------------
# design


def test_make_design_default_grid():
    S, train, test = make_design(SimConfig())
    assert S.size == 30
    npt.assert_allclose(S[0], 0.0)
    npt.assert_allclose(S[29], 3.0)
    npt.assert_allclose(np.diff(S), 3.0 / 29)
    npt.assert_array_equal(train, np.arange(0, 30, 3))
    npt.assert_array_equal(np.sort(np.concatenate([train, test])), np.arange(30))


def test_full_grid_training_refuses_scoring():
    config = _small_scenario(n_train=24, reps=1)
    with pytest.raises(InputError):
        run_experiment(config, [make_config("gp-gp", 1)])


# ---------------------------------------------------------------------------
# truth and error draws


def test_sample_truth_matches_kernel_covariance():
    config = SimConfig()
    S, _, _ = make_design(config)
    K = gram_matrix(config.kernel_truth, S[:, None])
    rng = np.random.default_rng(2)
    ndraw = 10_000
    F = np.stack([sample_truth(config, rng) for _ in range(ndraw)])
    pick = [0, 14, 29]
    for a in pick:
        se_mean = np.sqrt(K[a, a] / ndraw)
        assert abs(F[:, a].mean()) < 3.0 * se_mean
        for b in pick:
            emp = float(F[:, a] @ F[:, b]) / ndraw
            se_cov = np.sqrt((K[a, a] * K[b, b] + K[a, b] ** 2) / ndraw)
            assert abs(emp - K[a, b]) < 3.0 * se_cov


def test_sample_truth_deterministic():
    config = SimConfig()
    one = sample_truth(config, np.random.default_rng(11))
    two = sample_truth(config, np.random.default_rng(11))
    npt.assert_array_equal(one, two)


def test_gaussian_errors_match_phi():
    config = SimConfig(error_kind=ERROR_GAUSSIAN, phi_truth=0.2)
    rng = np.random.default_rng(4)
    e = np.concatenate([sample_errors(config, rng) for _ in range(400)])
    se = config.phi_truth * np.sqrt(2.0 / (e.size - 1))
    assert abs(e.var(ddof=1) - config.phi_truth) < 3.0 * se
    assert abs(e.mean()) < 3.0 * np.sqrt(config.phi_truth / e.size)


def test_etp_errors_are_heavy_tailed():
    config = SimConfig(error_kind=ERROR_ETP, error_nu=2.0)
    rng = np.random.default_rng(6)
    e = np.concatenate([sample_errors(config, rng) for _ in range(2000)])
    # scale mixing inflates fourth moments well past the Gaussian value
    assert stats.kurtosis(e, fisher=True) > 1.0


def test_etp_scale_is_shared_within_curve():
    # one IG draw per curve makes within-curve variances spread much more
    # than the chi-square wobble of the Gaussian sampler
    n_curves = 2000
    rng_g = np.random.default_rng(8)
    rng_t = np.random.default_rng(8)
    cfg_g = SimConfig(error_kind=ERROR_GAUSSIAN)
    cfg_t = SimConfig(error_kind=ERROR_ETP, error_nu=2.5)
    logv_g = np.log([sample_errors(cfg_g, rng_g).var() for _ in range(n_curves)])
    logv_t = np.log([sample_errors(cfg_t, rng_t).var() for _ in range(n_curves)])
    assert logv_t.std() > 1.3 * logv_g.std()


# ---------------------------------------------------------------------------
# disturbances


def test_constant_disturbance_zero_gamma_is_identity():
    y = np.linspace(-1.0, 1.0, 10)
    config = SimConfig(disturbance=DISTURB_CONSTANT, gamma=0.0)
    out = inject_disturbance(y, config, np.random.default_rng(0))
    npt.assert_array_equal(out, y)
    assert out is not y


def test_no_disturbance_returns_copy():
    y = np.ones(5)
    config = SimConfig(disturbance=DISTURB_NONE)
    out = inject_disturbance(y, config, np.random.default_rng(0))
    npt.assert_array_equal(out, y)
    out[0] = 7.0
    assert y[0] == 1.0


def test_constant_disturbance_shifts_every_response():
    y = np.linspace(-1.0, 1.0, 10)
    config = SimConfig(disturbance=DISTURB_CONSTANT, gamma=2.0)
    out = inject_disturbance(y, config, np.random.default_rng(0))
    npt.assert_allclose(out - y, 2.0, rtol=0, atol=1e-12)


def test_t2_disturbance_location_and_tails():
    config = SimConfig(disturbance=DISTURB_RANDOM_T2, gamma=2.0, n_train=10)
    rng = np.random.default_rng(10)
    shifts = np.concatenate([
        inject_disturbance(np.zeros(config.n_train), config, rng)
        for _ in range(400)
    ])
    assert abs(np.median(shifts) - 2.0) < 0.1
    # t_2 has no fourth moment; excursions far beyond Gaussian range occur
    assert np.max(np.abs(shifts - 2.0)) > 10.0


# ---------------------------------------------------------------------------
# scoring


def test_mse_zero_for_perfect_fit():
    f = [np.linspace(0, 1, 7), np.linspace(1, 2, 7)]
    assert mse(f, [v.copy() for v in f], n_train=10) == 0.0


def test_mse_single_point_arithmetic():
    npt.assert_allclose(mse([[0.3]], [[0.0]], n_train=10), 0.009, rtol=1e-14)


def test_mse_matches_independent_sum():
    rng = np.random.default_rng(14)
    I, m, n = 3, 20, 10
    fh = [rng.normal(size=m) for _ in range(I)]
    f0 = [rng.normal(size=m) for _ in range(I)]
    want = sum(np.sum((a - b) ** 2) for a, b in zip(fh, f0)) / (n * I)
    npt.assert_allclose(mse(fh, f0, n_train=n), want, rtol=1e-14)


# ---------------------------------------------------------------------------
# replication plumbing


def test_simulate_batch_shapes_and_disturbance_placement():
    config = _small_scenario()
    none_cfg = _small_scenario(disturbance=DISTURB_NONE)
    data, truths, S, train_idx, test_idx = simulate_batch(
        config, np.random.default_rng(7))
    clean, _, _, _, _ = simulate_batch(none_cfg, np.random.default_rng(7))
    g, gc = data.groups[0], clean.groups[0]
    assert g.Y.shape == (config.J, config.n_train)
    assert len(truths) == config.I and truths[0].size == config.grid_size
    npt.assert_array_equal(g.X[:, 0], S[train_idx])
    # the constant shift consumes no draws, so only the target curve moves
    npt.assert_array_equal(g.Y[:2], gc.Y[:2])
    npt.assert_array_equal(g.Y[2], gc.Y[2] + config.gamma)


def test_run_experiment_reproducible(monkeypatch):
    monkeypatch.delenv("RTPR_THREADS", raising=False)
    config = _small_scenario()
    models = [make_config("gp-gp", 1), make_config("etpr-joint", 1, nu0=1.05)]
    one = run_experiment(config, models)
    two = run_experiment(config, models)
    assert one.model_names == two.model_names
    for name in one.model_names:
        assert one.mse[name].size == config.reps
        npt.assert_array_equal(one.mse[name], two.mse[name])
        npt.assert_array_equal(one.mse_mean[name], two.mse_mean[name])


def test_run_experiment_thread_count_invariance(monkeypatch):
    config = _small_scenario(reps=3)
    models = [make_config("gp-gp", 1)]
    monkeypatch.setenv("RTPR_THREADS", "1")
    serial = run_experiment(config, models)
    monkeypatch.setenv("RTPR_THREADS", "3")
    threaded = run_experiment(config, models)
    npt.assert_array_equal(serial.mse["gp-gp"], threaded.mse["gp-gp"])


def test_run_experiment_aggregates_scales_and_flags():
    config = _small_scenario(J=4, disturbed_curve=4, n_train=10, grid_size=30)
    result = run_experiment(config, [make_config("gp-tp", 1, nu1=3.0)])
    rhat = result.rhat_mean["gp-tp"]
    assert rhat.shape == (1, 4)
    assert rhat[0, 3] > np.max(rhat[0, :3])
    freq = result.flag_freq["gp-tp"]
    assert freq.shape == (1, 4)
    assert freq[0, 3] >= 0.5
    assert np.all(result.rhat_sd["gp-tp"] >= 0.0)


def test_run_experiment_records_failed_fits():
    config = _small_scenario(reps=2)
    result = run_experiment(config, [make_config("gp-tp", 1, nu1=3.0)],
                            fit_options=FitOptions(max_outer=1))
    assert len(result.failures) == 2
    for rep, name, message in result.failures:
        assert name == "gp-tp" and message
    assert np.all(np.isnan(result.mse["gp-tp"]))
    assert np.isnan(result.mse_mean["gp-tp"])
    assert "gp-tp" not in result.rhat_mean


# ---------------------------------------------------------------------------
# validation


def test_sim_config_validation():
    with pytest.raises(InputError):
        SimConfig(n_train=31)
    with pytest.raises(InputError):
        SimConfig(error_kind="cauchy")
    with pytest.raises(InputError):
        SimConfig(error_kind=ERROR_ETP)
    with pytest.raises(InputError):
        SimConfig(error_kind=ERROR_ETP, error_nu=1.0)
    with pytest.raises(InputError):
        SimConfig(disturbed_curve=7)
    with pytest.raises(InputError):
        SimConfig(reps=0)
    with pytest.raises(InputError):
        SimConfig(phi_truth=0.0)
    with pytest.raises(InputError):
        SimConfig(grid_range=(3.0, 0.0))


def test_run_experiment_input_validation(monkeypatch):
    config = _small_scenario(reps=1)
    with pytest.raises(InputError):
        run_experiment(config, [])
    with pytest.raises(InputError):
        run_experiment(config, [make_config("gp-gp", 2)])
    with pytest.raises(InputError):
        run_experiment(config, [make_config("gp-gp", 1), make_config("gp-gp", 1)])
    monkeypatch.setenv("RTPR_THREADS", "many")
    with pytest.raises(InputError):
        run_experiment(config, [make_config("gp-gp", 1)])

"""End-to-end acceptance checks, one test per shipped guarantee.

Each test states a user-visible property of the package — exact
reductions to plain GP regression, agreement of analytic derivatives
with finite differences, fidelity of the Laplace-approximated
likelihood, robustness orderings of the simulation harness, outlying
curve separation, sign-flip invariance, and byte determinism of the
simulate command — together with its tolerance and runtime budget.
"""

import time

import numpy as np
import numpy.testing as npt
from scipy.integrate import dblquad
from scipy.stats import multivariate_normal

from rtpr import cli as cli_mod
from rtpr.cli import EXIT_OK
from rtpr.estimate import (Beta, adjusted_profile_m, blup_f, fit, h1_value,
                           r_scores)
from rtpr.kernel import (KernelParams, cross_matrix, free_param_names,
                         gram_gradients, gram_matrix)
from rtpr.model import (BatchData, GroupData, RandomEffects, build_covariance,
                        covariance_partials, extract_free_r, free_r_labels,
                        make_config)
from rtpr.predict import etpr_variance_factor, predict_new, predict_train
from rtpr.simulate import SimConfig, run_experiment

from pathlib import Path

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


# ---------------------------------------------------------------------------
# shared generators


def _curve_batch(seed, n, J, noise=0.4, shift=None):
    """One group of J noisy copies of a smooth curve."""
    rng = np.random.default_rng(seed)
    X = np.sort(rng.uniform(0.0, 3.0, size=(n, 1)), axis=0)
    f = np.sin(1.7 * X[:, 0] + rng.uniform(0.0, 2.0))
    Y = f[None, :] + rng.normal(scale=noise, size=(J, n))
    if shift is not None:
        Y[shift[0]] += shift[1]
    return BatchData(groups=(GroupData(X=X, Y=Y),))


def _random_beta(rng, p=1, I=1, nu0=None, nu1=None):
    thetas = tuple(
        KernelParams(theta0=float(rng.uniform(0.3, 2.0)),
                     eta=rng.uniform(0.5, 3.0, size=p),
                     xi=rng.uniform(0.02, 0.3, size=p))
        for _ in range(I))
    phis = tuple(float(rng.uniform(0.1, 0.8)) for _ in range(I))
    return Beta(thetas=thetas, phis=phis, nu0=nu0, nu1=nu1)


def _replicated_gpr(theta, phi, g, Z):
    """Textbook GPR latent moments with J noisy copies of one curve."""
    K = gram_matrix(theta, g.X)
    A = K + (phi / g.J) * np.eye(g.n)
    ybar = g.Y.mean(axis=0)
    Kz = cross_matrix(theta, Z, g.X)
    Kzz = cross_matrix(theta, Z, Z)
    mean = Kz @ np.linalg.solve(A, ybar)
    cov = Kzz - Kz @ np.linalg.solve(A, Kz.T)
    return mean, cov


def _rel_err(analytic, reference):
    a = np.asarray(analytic, dtype=float)
    b = np.asarray(reference, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


# ---------------------------------------------------------------------------
# 1. plain-GP model is exactly textbook GP regression


def test_criterion_1_gpr_reduction_identity():
    start = time.monotonic()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for k in range(20):
        n = int(rng.integers(6, 16))
        J = int(rng.integers(1, 4))
        data = _curve_batch(3000 + k, n=n, J=J)
        res = fit(make_config("gp-gp", 1), data)
        g = data.groups[0]
        theta = res.beta_hat.thetas[0]
        phi = res.beta_hat.phis[0]

        # the maximized objective is the textbook log marginal likelihood
        C = np.tile(gram_matrix(theta, g.X), (J, J)) + phi * np.eye(n * J)
        logml = multivariate_normal.logpdf(g.y_stacked, mean=np.zeros(n * J),
                                           cov=C)
        worst = max(worst, abs(res.m_value - logml))

        # predictions agree with the replicated-observation GPR posterior
        Z = np.linspace(0.1, 2.9, 7)[:, None]
        pred = predict_new(res, 0, Z, with_covariance=True)
        mean_o, cov_o = _replicated_gpr(theta, phi, g, Z)
        worst = max(worst, float(np.max(np.abs(pred.mean - mean_o))))
        worst = max(worst, float(np.max(np.abs(pred.covariance - cov_o))))
        ptr = predict_train(res, 0)
        mean_t, _ = _replicated_gpr(theta, phi, g, g.X)
        worst = max(worst, float(np.max(np.abs(ptr.mean - mean_t))))
    elapsed = time.monotonic() - start
    print(f"gpr reduction: worst |diff| = {worst:.3e}, {elapsed:.1f}s")
    assert worst < 1e-6
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# 2. the fitted-curve closed form equals the marginal conditional mean


def test_criterion_2_blup_equals_marginal_conditional_mean():
    start = time.monotonic()
    rng = np.random.default_rng(77)
    worst = 0.0
    for k in range(50):
        n = int(rng.integers(3, 9))
        J = int(rng.integers(1, 4))
        X = np.sort(rng.uniform(0.0, 3.0, size=(n, 1)), axis=0)
        Y = rng.normal(size=(J, n))
        data = BatchData(groups=(GroupData(X=X, Y=Y),))
        beta = _random_beta(rng, nu0=2.0, nu1=2.0)
        cfg = make_config("tp-tp", 1, nu0=2.0, nu1=2.0,
                          phis=beta.phis)
        ri = rng.lognormal(mean=0.0, sigma=0.7, size=J + 1)
        effects = RandomEffects(r=(ri,))

        mean_a = blup_f(cfg, beta, effects, data, 0)

        K = gram_matrix(beta.thetas[0], X)
        C = build_covariance(cfg, effects, K, 0)
        alpha = np.linalg.solve(C, data.groups[0].y_stacked)
        mean_b = ri[0] * (K @ alpha.reshape(J, n).sum(axis=0))
        worst = max(worst, float(np.max(np.abs(mean_a - mean_b))))
    elapsed = time.monotonic() - start
    print(f"blup vs marginal: worst |diff| = {worst:.3e}, {elapsed:.1f}s")
    assert worst < 1e-8
    assert elapsed < 5.0


# ---------------------------------------------------------------------------
# 3. analytic derivatives match central finite differences


def test_criterion_3_gradient_suite_matches_finite_differences():
    start = time.monotonic()
    rng = np.random.default_rng(505)
    names = ("gp-tp", "tp-gp", "tp-tp", "etpr-joint")
    worst = 0.0
    for k in range(50):
        name = names[k % len(names)]
        n = int(rng.integers(4, 8))
        J = int(rng.integers(1, 4))
        p = int(rng.integers(1, 3))
        X = rng.uniform(0.0, 3.0, size=(n, p))
        Y = rng.normal(size=(J, n))
        data = BatchData(groups=(GroupData(X=X, Y=Y),))
        beta = _random_beta(rng, p=p, nu0=2.5, nu1=1.8)
        cfg = make_config(name, 1, nu0=2.5, nu1=1.8, phis=beta.phis)
        ri = rng.lognormal(mean=0.0, sigma=0.5, size=J + 1)
        if cfg.joint_error:
            ri[:] = ri[0]
        if not cfg.signal.is_etp:
            ri[0] = 1.0
        if not cfg.noise.is_etp:
            ri[1:] = 1.0
        effects = RandomEffects(r=(ri,))
        labels = free_r_labels(cfg, J)

        # (a) scale scores against differences of the scale likelihood
        g_an = r_scores(cfg, beta, effects, data, 0)
        free = extract_free_r(cfg, ri)
        g_fd = np.empty_like(free)
        for s in range(free.size):
            h = 1e-5 * max(1.0, abs(free[s]))
            rp, rm = free.copy(), free.copy()
            rp[s] += h
            rm[s] -= h
            full_p = ri.copy()
            full_m = ri.copy()
            if cfg.joint_error:
                full_p[:] = rp[0]
                full_m[:] = rm[0]
            else:
                idx = 0 if labels[s] == "r0" else int(labels[s][1:])
                full_p[idx] = rp[s]
                full_m[idx] = rm[s]
            up = h1_value(cfg, beta, RandomEffects(r=(full_p,)), data)
            dn = h1_value(cfg, beta, RandomEffects(r=(full_m,)), data)
            g_fd[s] = (up - dn) / (2.0 * h)
        worst = max(worst, _rel_err(g_an, g_fd))

        # (b) kernel Gram gradients in the internal coordinates
        theta = beta.thetas[0]
        grads = gram_gradients(theta, X)
        u = theta.to_log()
        for idx, pname in enumerate(free_param_names(p)):
            h = 1e-5 * max(1.0, abs(u[idx]))
            up_, dn_ = u.copy(), u.copy()
            up_[idx] += h
            dn_[idx] -= h
            dK = (gram_matrix(KernelParams.from_log(up_), X)
                  - gram_matrix(KernelParams.from_log(dn_), X)) / (2.0 * h)
            worst = max(worst, _rel_err(grads[pname], dK))

        # (c) covariance partials: scales, noise variance, kernel names
        K = gram_matrix(theta, X)
        parts = covariance_partials(cfg, effects, K, grads, 0)
        for s, lab in enumerate(labels):
            h = 1e-5 * max(1.0, abs(free[s]))
            rp = extract_free_r(cfg, ri).copy()
            rm = rp.copy()
            rp[s] += h
            rm[s] -= h

            def _full(vals):
                full = ri.copy()
                if cfg.joint_error:
                    full[:] = vals[0]
                else:
                    j = 0 if labels[s] == "r0" else int(labels[s][1:])
                    full[j] = vals[s]
                return RandomEffects(r=(full,))

            dC = (build_covariance(cfg, _full(rp), K, 0)
                  - build_covariance(cfg, _full(rm), K, 0)) / (2.0 * h)
            worst = max(worst, _rel_err(parts[lab], dC))
        h = 1e-5 * max(1.0, beta.phis[0])
        dC_phi = (build_covariance(cfg.with_phis([beta.phis[0] + h]), effects, K, 0)
                  - build_covariance(cfg.with_phis([beta.phis[0] - h]), effects, K, 0)
                  ) / (2.0 * h)
        worst = max(worst, _rel_err(parts["phi"], dC_phi))
        for idx, pname in enumerate(free_param_names(p)):
            h = 1e-5 * max(1.0, abs(u[idx]))
            up_, dn_ = u.copy(), u.copy()
            up_[idx] += h
            dn_[idx] -= h
            dC_k = (build_covariance(cfg, effects,
                                     gram_matrix(KernelParams.from_log(up_), X), 0)
                    - build_covariance(cfg, effects,
                                       gram_matrix(KernelParams.from_log(dn_), X), 0)
                    ) / (2.0 * h)
            worst = max(worst, _rel_err(parts[pname], dC_k))
    elapsed = time.monotonic() - start
    print(f"gradient suite: worst rel err = {worst:.3e}, {elapsed:.1f}s")
    assert worst < 1e-4
    assert elapsed < 30.0


# ---------------------------------------------------------------------------
# 4. the Laplace-adjusted likelihood tracks brute-force quadrature


def test_criterion_4_laplace_matches_quadrature_on_scalar_instances():
    start = time.monotonic()
    rng = np.random.default_rng(909)
    nus = np.linspace(50.0, 200.0, 10)
    worst = 0.0
    for k, nu in enumerate(nus):
        x = float(rng.uniform(0.5, 2.5))
        y = float(rng.normal(scale=1.2))
        data = BatchData(groups=(GroupData(X=np.array([[x]]),
                                           Y=np.array([[y]])),))
        beta = _random_beta(rng, nu0=float(nu), nu1=float(nu))
        cfg = make_config("tp-tp", 1, nu0=float(nu), nu1=float(nu),
                          phis=beta.phis)

        m, effects, _ = adjusted_profile_m(cfg, beta, data)
        t_hat = np.log(extract_free_r(cfg, effects.r[0]))
        w = 12.0 / np.sqrt(nu)

        def integrand(t1, t0):
            r = np.array([np.exp(t0), np.exp(t1)])
            h1 = h1_value(cfg, beta, RandomEffects(r=(r,)), data)
            return np.exp(h1 + t0 + t1 - m)

        T, err = dblquad(integrand, t_hat[0] - w, t_hat[0] + w,
                         t_hat[1] - w, t_hat[1] + w,
                         epsabs=1e-10, epsrel=1e-9)
        gap = abs(np.log(T))
        worst = max(worst, gap)
    elapsed = time.monotonic() - start
    print(f"laplace fidelity: worst |log gap| = {worst:.4f}, {elapsed:.1f}s")
    assert worst < 0.05
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 5. shared-scale model: GPR mean, scaled-GPR covariance, calibrated scale


def test_criterion_5_joint_error_closed_forms_and_scale_calibration():
    data = _curve_batch(41, n=20, J=2)
    res = fit(make_config("etpr-joint", 1, nu0=1.5), data)
    g = data.groups[0]
    theta = res.beta_hat.thetas[0]
    phi = res.beta_hat.phis[0]

    cfg1 = res.config.with_phis(res.beta_hat.phis)
    ones = RandomEffects.ones(data)
    K = gram_matrix(theta, g.X)
    C1 = build_covariance(cfg1, ones, K, 0)
    s0 = etpr_variance_factor(g.y_stacked, C1, res.beta_hat.nu0)

    Z = np.linspace(0.15, 2.85, 8)[:, None]
    pred = predict_new(res, 0, Z, with_covariance=True)
    mean_o, cov_o = _replicated_gpr(theta, phi, g, Z)
    npt.assert_allclose(pred.mean, mean_o, atol=1e-8)
    npt.assert_allclose(pred.covariance, s0 * cov_o, atol=1e-8)

    ptr = predict_train(res, 0)
    mean_t, cov_t = _replicated_gpr(theta, phi, g, g.X)
    npt.assert_allclose(ptr.mean, mean_t, atol=1e-8)
    npt.assert_allclose(ptr.covariance, s0 * cov_t, atol=1e-8)

    # under y ~ N(0, C) the variance factor is calibrated: E[s] = 1
    rng = np.random.default_rng(6060)
    n, J, nu0 = 4, 3, 1.8
    beta = _random_beta(rng, nu0=nu0)
    X = np.sort(rng.uniform(0.0, 3.0, size=(n, 1)), axis=0)
    data_mc = BatchData(groups=(GroupData(X=X, Y=np.zeros((J, n))),))
    cfg_mc = make_config("etpr-joint", 1, nu0=nu0, phis=beta.phis)
    C = build_covariance(cfg_mc, RandomEffects.ones(data_mc),
                         gram_matrix(beta.thetas[0], X), 0)
    L = np.linalg.cholesky(C)
    draws = np.empty(10_000)
    for t in range(draws.size):
        y = L @ rng.standard_normal(n * J)
        draws[t] = etpr_variance_factor(y, C, nu0)
    se = float(np.std(draws, ddof=1) / np.sqrt(draws.size))
    gap = abs(float(np.mean(draws)) - 1.0)
    print(f"joint closed forms ok; MC mean of s0 off by {gap:.2e} (3*SE={3*se:.2e})")
    assert gap <= 3.0 * se


# ---------------------------------------------------------------------------
# 6. robustness orderings of held-out MSE under a contaminated curve


def test_criterion_6_disturbed_curve_mse_orderings():
    start = time.monotonic()
    models = [make_config("gp-gp", 1),
              make_config("gp-tp", 1, nu0=1.05, nu1=1.05)]
    ratios = {}
    fails = []
    for gamma in (0.5, 1.0, 2.0):
        cfg = SimConfig(error_kind="gaussian", disturbance="constant",
                        gamma=gamma, reps=100, seed=0)
        res = run_experiment(cfg, models)
        ratios[gamma] = res.mse_mean["gp-tp"] / res.mse_mean["gp-gp"]
        fails += list(res.failures)
        print(f"gamma={gamma}: gp-gp mse={res.mse_mean['gp-gp']:.4f} "
              f"gp-tp mse={res.mse_mean['gp-tp']:.4f} "
              f"ratio={ratios[gamma]:.3f}")
    elapsed = time.monotonic() - start
    print(f"mse orderings: {elapsed/60:.1f} min, failures={fails}")
    assert not fails
    assert ratios[1.0] < 1.0
    assert ratios[2.0] < 1.0
    assert ratios[2.0] < 0.7
    assert 0.75 <= ratios[0.5] <= 1.25
    assert elapsed < 1800.0


# ---------------------------------------------------------------------------
# 7. estimated error scales isolate the contaminated curve


def test_criterion_7_outlying_curve_scale_separation():
    cfg = SimConfig(I=2, error_kind="gaussian", disturbance="constant",
                    gamma=2.0, reps=100, seed=0)
    res = run_experiment(cfg, [make_config("gp-tp", 2, nu0=1.05, nu1=1.05)])
    rhat = res.rhat_mean["gp-tp"]
    freq = res.flag_freq["gp-tp"]
    assert rhat.shape == (2, 6)
    for i in range(2):
        clean = float(np.max(rhat[i, :5]))
        print(f"group {i}: mean scale of disturbed curve {rhat[i, 5]:.2f} vs "
              f"max clean {clean:.3f}; flag rate {freq[i, 5]:.2f}")
        assert rhat[i, 5] > 5.0 * clean
        assert freq[i, 5] >= 0.90


# ---------------------------------------------------------------------------
# 8. estimates are even in the data


def test_criterion_8_sign_flip_invariance_bitwise():
    rng = np.random.default_rng(314)
    menu = [("gp-tp", dict(nu1=2.0)), ("tp-tp", dict(nu0=2.0, nu1=2.0)),
            ("etpr-joint", dict(nu0=1.5))]
    for k in range(10):
        name, kw = menu[k % len(menu)]
        n = int(rng.integers(5, 9))
        J = int(rng.integers(2, 4))
        data = _curve_batch(7000 + k, n=n, J=J)
        flipped = BatchData(groups=tuple(
            GroupData(X=g.X, Y=-g.Y) for g in data.groups))
        cfg = make_config(name, 1, **kw)
        a = fit(cfg, data)
        b = fit(cfg, flipped)
        assert a.beta_hat.phis == b.beta_hat.phis
        for ta, tb in zip(a.beta_hat.thetas, b.beta_hat.thetas):
            assert ta.theta0 == tb.theta0
            npt.assert_array_equal(ta.eta, tb.eta)
            npt.assert_array_equal(ta.xi, tb.xi)
        for ra, rb in zip(a.r_hat.r, b.r_hat.r):
            npt.assert_array_equal(ra, rb)
        npt.assert_array_equal(a.f_hat[0], -b.f_hat[0])


# ---------------------------------------------------------------------------
# 9. the simulate command is byte-deterministic


def test_criterion_9_simulate_byte_determinism(tmp_path, monkeypatch):
    outs = []
    for tag, threads in (("a", None), ("b", None), ("c", "2")):
        if threads is None:
            monkeypatch.delenv("RTPR_THREADS", raising=False)
        else:
            monkeypatch.setenv("RTPR_THREADS", threads)
        out = tmp_path / f"run_{tag}.csv"
        code = cli_mod.main(["simulate", "--config", str(CONFIGS / "smoke.cfg"),
                             "--out", str(out)])
        assert code == EXIT_OK
        outs.append((out.read_bytes(),
                     (out.parent / (out.name + ".reps.csv")).read_bytes()))
    assert outs[0] == outs[1]
    assert outs[0] == outs[2]

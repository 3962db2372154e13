"""Predictive distributions and outlying-curve diagnosis.

The predictive mean at any input is the conditional mean of the shared
curve given the data and the fitted scales.  Reported variances are not
the plug-in conditional variances: they come from the inverse of the full
negative curvature of the hierarchical log likelihood over the latent
values and the free scales, so the uncertainty of the estimated scales
widens them.  At a new input z the relevant curvature is taken jointly
over (y(z), f(z), f at the training inputs, scales), and the variance of
the response prediction is the leading diagonal entry of its inverse; a
fresh observation at z carries an error scale at its prior mean of one.

Under ``joint_error`` (one shared scale per group) the predictive law has
a closed form: the mean equals the scale-free Gaussian-process mean and
the covariance is the Gaussian posterior covariance times the data-driven
factor computed by :func:`etpr_variance_factor`.

Outlying curves are read off the fitted per-curve error scales: a curve
whose scale exceeds a multiple of the within-group median is flagged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import chol_inv, chol_kernel, chol_pd, chol_solve
from .errors import InputError, NumericError, UnsupportedModelError
from .estimate import FitResult, _prior_nus
from .kernel import cross_matrix, eval_kernel, gram_matrix
from .model import RandomEffects, build_covariance, free_r_labels, ig_curvature


@dataclass(frozen=True)
class Prediction:
    """Predictive summary at a set of inputs.

    ``covariance`` is filled only when a full matrix is requested; at new
    inputs it is the plug-in conditional covariance (the per-point
    variances remain the curvature-corrected ones).
    """

    at: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    covariance: np.ndarray | None = None

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.variance)


@dataclass(frozen=True)
class OutlierRule:
    """Flag curve j when r_ij > c_mult * median of its group's scales."""

    c_mult: float = 3.0

    def __post_init__(self):
        if not np.isfinite(self.c_mult) or self.c_mult <= 0:
            raise InputError("c_mult must be positive")


@dataclass(frozen=True)
class OutlierReport:
    """Fitted error scales and threshold flags, one row per curve."""

    rhat: tuple[np.ndarray, ...]
    flags: tuple[np.ndarray, ...]
    medians: tuple[float, ...]
    rule: OutlierRule


class _GroupPredict:
    """Shared pieces for predictions in one group of a fitted model."""

    def __init__(self, fit: FitResult, group: int):
        if not (0 <= group < fit.data.I):
            raise InputError(f"group index {group} out of range")
        self.fit = fit
        self.i = group
        self.g = fit.data.groups[group]
        self.config = fit.config
        self.beta = fit.beta_hat
        self.ri = fit.r_hat.r[group]
        self.phi = fit.beta_hat.phis[group]
        self.theta = fit.beta_hat.thetas[group]
        self.K = gram_matrix(self.theta, self.g.X)
        cfg = fit.config.with_phis(fit.beta_hat.phis)
        self.C = build_covariance(cfg, fit.r_hat, self.K, group)
        self.alpha = chol_solve(chol_pd(self.C), self.g.y_stacked)
        # sum of the J curve blocks of alpha: (b^T kron K) alpha = K @ alpha_sum
        self.alpha_sum = self.alpha.reshape(self.g.J, self.g.n).sum(axis=0)

    def block_sum_inv(self, C: np.ndarray) -> np.ndarray:
        """Sum of all J x J blocks of C^{-1}, an n x n matrix."""
        n, J = self.g.n, self.g.J
        Cinv = chol_inv(chol_pd(C))
        S = np.zeros((n, n))
        for a in range(J):
            for b in range(J):
                S += Cinv[a * n:(a + 1) * n, b * n:(b + 1) * n]
        return S

    def unit_covariance(self) -> np.ndarray:
        """The group covariance with every scale set to one."""
        cfg = self.config.with_phis(self.beta.phis)
        ones = RandomEffects.ones(self.fit.data)
        return build_covariance(cfg, ones, self.K, self.i)

    def mean_at_train(self) -> np.ndarray:
        return self.ri[0] * (self.K @ self.alpha_sum)

    def mean_at(self, Kz: np.ndarray) -> np.ndarray:
        return self.ri[0] * (Kz @ self.alpha_sum)


def etpr_variance_factor(y: np.ndarray, C: np.ndarray, nu0: float) -> float:
    """Data-driven scale of the joint-error predictive covariance.

        s = (2 (nu0 - 1) + y^T C^{-1} y) / (2 (nu0 - 1) + len(y))

    with C the unit-scale covariance of the stacked group vector y.  Under
    y ~ N(0, C) the quadratic form has mean len(y), so s has mean one.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    C = np.asarray(C, dtype=float)
    if C.shape != (y.size, y.size):
        raise InputError("C must be square with the dimension of y")
    if not np.isfinite(nu0) or nu0 <= 1.0:
        raise InputError("tail index nu0 must be finite and > 1")
    quad = float(y @ chol_solve(chol_pd(C), y))
    return (2.0 * (nu0 - 1.0) + quad) / (2.0 * (nu0 - 1.0) + y.size)


def predict_train(fit: FitResult, group: int, *, with_covariance: bool = True) -> Prediction:
    """Predictive distribution of the group curve at its training inputs.

    The mean is the fitted curve.  For a joint-error model the covariance
    is the closed-form scaled Gaussian posterior; otherwise it is the
    curvature-corrected block stored with the fit.
    """
    wk = _GroupPredict(fit, group)
    mean = wk.mean_at_train()
    if fit.config.joint_error:
        C1 = wk.unit_covariance()
        s = etpr_variance_factor(wk.g.y_stacked, C1, fit.beta_hat.nu0)
        S = wk.block_sum_inv(C1)
        cov = s * (wk.K - wk.K @ S @ wk.K)
    else:
        cov = fit.H_in[group]
    var = np.maximum(np.diag(cov), 0.0)
    return Prediction(at=wk.g.X, mean=mean, variance=var,
                      covariance=cov if with_covariance else None)


def predict_new(fit: FitResult, group: int, Z, *, with_covariance: bool = False) -> Prediction:
    """Predict the group's next response curve at new inputs Z.

    Per-point variances include the scale-estimation uncertainty through
    the joint curvature at (y(z), f(z), f, r); the optional full
    covariance is the plug-in conditional one.
    """
    wk = _GroupPredict(fit, group)
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[1] != wk.g.p:
        raise InputError("query points must match the covariate dimension")
    Kz = cross_matrix(wk.theta, Z, wk.g.X)
    mean = wk.mean_at(Kz)
    kzz = np.array([eval_kernel(wk.theta, z, z) for z in Z])

    if fit.config.joint_error:
        C1 = wk.unit_covariance()
        s = etpr_variance_factor(wk.g.y_stacked, C1, fit.beta_hat.nu0)
        S = wk.block_sum_inv(C1)
        var = s * (kzz - np.einsum("ta,ab,tb->t", Kz, S, Kz))
    else:
        var = np.empty(Z.shape[0])
        Sr = None
        for t in range(Z.shape[0]):
            try:
                var[t] = _corrected_new_variance(wk, Z[t], mean[t])
            except NumericError:
                # joint curvature not positive definite at this fit: report
                # the plug-in predictive variance instead of a corrected one
                if Sr is None:
                    Sr = wk.block_sum_inv(wk.C)
                r0 = wk.ri[0]
                var[t] = (r0 * kzz[t]
                          - r0 ** 2 * float(Kz[t] @ Sr @ Kz[t]) + wk.phi)
    var = np.maximum(var, 0.0)

    cov = None
    if with_covariance:
        if fit.config.joint_error:
            C1 = wk.unit_covariance()
            s = etpr_variance_factor(wk.g.y_stacked, C1, fit.beta_hat.nu0)
            S = wk.block_sum_inv(C1)
            Kzz = cross_matrix(wk.theta, Z, Z)
            cov = s * (Kzz - Kz @ S @ Kz.T)
        else:
            Sr = wk.block_sum_inv(wk.C)
            Kzz = cross_matrix(wk.theta, Z, Z)
            r0 = wk.ri[0]
            cov = r0 * Kzz - r0 ** 2 * (Kz @ Sr @ Kz.T)
    return Prediction(at=Z, mean=mean, variance=var, covariance=cov)


def _corrected_new_variance(wk: _GroupPredict, z: np.ndarray, mu_z: float) -> float:
    """Variance of a new response at z from the joint curvature at z.

    Variables are ordered (y_z, f_z, f_1..n, free scales).  The new
    response is y_z = f_z + e with e ~ N(0, phi) at the unit prior scale;
    (f_z, f) carries the prior N(0, r0 K_aug) over the augmented design.
    Evaluated at the fitted curve, the fitted scales and y_z = f_z = the
    predictive mean at z.
    """
    g = wk.g
    n, J = g.n, g.J
    phi = wk.phi
    ri = wk.ri
    config = wk.config
    beta = wk.beta
    X_aug = np.vstack([np.atleast_1d(z)[None, :], g.X])
    K_aug = gram_matrix(wk.theta, X_aug)
    Q = chol_inv(chol_kernel(K_aug))

    labels = free_r_labels(config, J)
    nus = _prior_nus(config, beta, J)
    d = len(labels)
    f_hat = wk.fit.f_hat[wk.i]
    gvec = np.concatenate([[mu_z], f_hat])

    dim = 2 + n + d
    M = np.zeros((dim, dim))
    # response block
    M[0, 0] = 1.0 / phi
    M[0, 1] = M[1, 0] = -1.0 / phi
    # latent block: prior precision plus observation information
    lat = slice(1, 2 + n)
    M[lat, lat] = Q / ri[0]
    M[1, 1] += 1.0 / phi
    w = float(np.sum(1.0 / ri[1:]))
    M[2:2 + n, 2:2 + n] += (w / phi) * np.eye(n)

    Qg = Q @ gvec
    quad_g = float(gvec @ Qg)
    for s, lab in enumerate(labels):
        col = 2 + n + s
        if lab == "r":
            r = ri[0]
            resid_sum = np.sum(g.Y - f_hat, axis=0)
            M[lat, col] = -Qg / r ** 2
            M[2:2 + n, col] += resid_sum / (phi * r ** 2)
            diag_val = -((n + 1) / (2.0 * r ** 2)) + quad_g / r ** 3
            for j in range(J):
                ssq = float(np.sum((g.Y[j] - f_hat) ** 2))
                diag_val += -(n / (2.0 * r ** 2)) + ssq / (phi * r ** 3)
            M[col, col] = diag_val - ig_curvature(nus[s], r)
        elif lab == "r0":
            r0 = ri[0]
            M[lat, col] = -Qg / r0 ** 2
            M[col, col] = (-((n + 1) / (2.0 * r0 ** 2)) + quad_g / r0 ** 3
                           - ig_curvature(nus[s], r0))
        else:
            j = int(lab[1:]) - 1
            rj = ri[1 + j]
            resid = g.Y[j] - f_hat
            M[2:2 + n, col] = resid / (phi * rj ** 2)
            ssq = float(resid @ resid)
            M[col, col] = (-(n / (2.0 * rj ** 2)) + ssq / (phi * rj ** 3)
                           - ig_curvature(nus[s], rj))
        M[col, :col] = M[:col, col]

    e0 = np.zeros(dim)
    e0[0] = 1.0
    x = chol_solve(chol_pd(0.5 * (M + M.T)), e0)
    return float(x[0])


def outlier_scores(fit: FitResult, rule: OutlierRule | None = None) -> OutlierReport:
    """Flag curves whose fitted error scale dwarfs its group's median.

    Defined for models with free per-curve error scales; a plain-GP error
    side or a joint-error model has no per-curve scales to compare.
    """
    if rule is None:
        rule = OutlierRule()
    if fit.config.joint_error or not fit.config.noise.is_etp:
        raise UnsupportedModelError(
            "outlier scores need free per-curve error scales "
            "(an ETP error process without joint_error)")
    rhat = []
    flags = []
    medians = []
    for ri in fit.r_hat.r:
        scales = ri[1:].copy()
        med = float(np.median(scales))
        rhat.append(scales)
        flags.append(scales > rule.c_mult * med)
        medians.append(med)
    return OutlierReport(rhat=tuple(rhat), flags=tuple(flags),
                         medians=tuple(medians), rule=rule)

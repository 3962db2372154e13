"""Hierarchical-likelihood estimation for robust process regression.

Estimation runs on two nested levels.  With hyperparameters beta held
fixed (kernel parameters, noise variances phi_i, tail indices), the free
scales r maximize

    h1(beta, r) = sum_i [ log N(y_i; 0, C_ri) + log prior(r_i) ],

the likelihood with the latent curves integrated out but still joint in
the scales.  The maximizer r_hat(beta) solves one score equation per free
scale; a damped Newton iteration in log(r) handles them groupwise, with a
bracketed scalar root-finding sweep as fallback (each score tends to
+infinity as its scale goes to 0 and to 0 from below as it grows, so a
bracketing interval always exists).  beta then maximizes the adjusted
profile likelihood

    m(beta) = h1(beta, r_hat(beta)) - 0.5 * log det(B / (2 pi)),
    B = - d^2 h1 / dr dr^T  at r_hat,

the Laplace approximation of the r-integrated likelihood.  The outer
optimizer is L-BFGS-B on unconstrained log parameters with
finite-difference gradients; r_hat is re-solved from r = 1 at every beta,
so the implicit dependence of m on beta is differentiated through
automatically and the whole pipeline stays deterministic.

With every scale fixed at one (a GP-GP model) there are no free scales,
h1 is the exact Gaussian log marginal and the determinant correction
vanishes, so m reduces to the familiar marginal likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize

from ._linalg import chol_inv, chol_kernel, chol_logdet, chol_pd, chol_solve, require_finite
from .errors import EstimationError, InputError, NumericError
from .kernel import KernelParams, gram_matrix
from .model import (
    NU_FLOOR,
    NU_MODE_ESTIMATED,
    BatchData,
    ModelConfig,
    RandomEffects,
    expand_free_r,
    extract_free_r,
    free_r_labels,
    ig_curvature,
    ig_log_density,
    ig_score,
)

LOG_2PI = math.log(2.0 * math.pi)

# Value handed to the outer minimizer when an evaluation fails numerically.
_BAD_OBJECTIVE = 1e15

# Box for the unconstrained parameters, generous but overflow-safe.
_LOG_BOUND = 30.0


@dataclass(frozen=True)
class Beta:
    """Hyperparameter set: per-group kernels, noise variances, tail indices.

    ``nu0``/``nu1`` are None when the corresponding side is a plain GP; a
    joint-error model carries its single tail index in ``nu0``.
    """

    thetas: tuple[KernelParams, ...]
    phis: tuple[float, ...]
    nu0: float | None = None
    nu1: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "thetas", tuple(self.thetas))
        phis = tuple(float(p) for p in self.phis)
        object.__setattr__(self, "phis", phis)
        if len(self.thetas) != len(phis):
            raise InputError("need one kernel parameter set and one phi per group")
        if any(p <= 0 or not np.isfinite(p) for p in phis):
            raise InputError("phis must be positive and finite")
        for nu in (self.nu0, self.nu1):
            if nu is not None and (not np.isfinite(nu) or nu <= 1.0):
                raise InputError("tail indices must be finite and > 1")


@dataclass
class FitOptions:
    """Tolerances and controls for :func:`fit`.

    inner_tol : stop the scale solver when every score is this small.
    outer_tol : relative gradient tolerance for the outer optimizer.
    multi_start : extra perturbed restarts tried when the first start does
        not converge even after the rescue stages (0 disables).  ``seed``
        drives the perturbations.
    fd_step : relative step of the central differences the outer
        optimizer uses for gradients.  The profiled objective is only
        reproducible to the inner solver's termination jitter, so this
        must stay well above sqrt-epsilon territory.
    """

    inner_tol: float = 1e-8
    outer_tol: float = 1e-5
    max_inner: int = 200
    max_outer: int = 500
    init_beta: Beta | None = None
    multi_start: int = 2
    seed: int = 0
    fd_step: float = 1e-4
    track_path: bool = False


@dataclass
class Diagnostics:
    """What happened during a fit; attached to results and errors."""

    converged: bool = False
    outer_iterations: int = 0
    m_evaluations: int = 0
    inner_iterations_total: int = 0
    inner_fallbacks: int = 0
    final_grad_inf: float = math.nan
    final_inner_score_inf: float = math.nan
    b_indefinite: bool = False
    starts_used: int = 1
    path: list = field(default_factory=list)
    messages: list = field(default_factory=list)


@dataclass(frozen=True)
class FitResult:
    """A fitted model: everything needed for prediction and diagnosis.

    f_hat holds the per-group fitted curve values at the training inputs,
    H_in the matching curvature-corrected covariance blocks, and B the
    negative Hessian of h1 over all free scales (block diagonal across
    groups, in group order).
    """

    config: ModelConfig
    data: BatchData
    beta_hat: Beta
    r_hat: RandomEffects
    f_hat: tuple[np.ndarray, ...]
    B: np.ndarray
    H_in: tuple[np.ndarray, ...]
    m_value: float
    diagnostics: Diagnostics


# ---------------------------------------------------------------------------
# h-likelihood pieces


def _prior_nus(config: ModelConfig, beta: Beta, J: int) -> list[float]:
    """Tail index attached to each free scale, aligned with free_r_labels."""
    if config.joint_error:
        return [beta.nu0]
    nus = []
    if config.signal.is_etp:
        nus.append(beta.nu0)
    if config.noise.is_etp:
        nus += [beta.nu1] * J
    return nus


def h0_value(config: ModelConfig, beta: Beta, effects: RandomEffects,
             f, data: BatchData) -> float:
    """Full hierarchical log likelihood, latent curves included.

    ``f`` is a sequence of per-group latent vectors.  The value is

        sum_i [ sum_j log N(y_ij; f_i, phi_i r_ij I)
                + log N(f_i; 0, r_i0 K_i) + log prior(r_i) ].
    """
    total = 0.0
    for i, g in enumerate(data.groups):
        fi = np.asarray(f[i], dtype=float)
        if fi.shape != (g.n,):
            raise InputError("latent vector length must match the design")
        ri = effects.r[i]
        phi = beta.phis[i]
        K = gram_matrix(beta.thetas[i], g.X)
        L = chol_kernel(K)
        quad = float(fi @ chol_solve(L, fi))
        total += -0.5 * (g.n * LOG_2PI + g.n * math.log(ri[0])
                         + chol_logdet(L) + quad / ri[0])
        for j in range(g.J):
            resid = g.Y[j] - fi
            total += -0.5 * (g.n * LOG_2PI + g.n * math.log(phi * ri[1 + j])
                             + float(resid @ resid) / (phi * ri[1 + j]))
        total += _log_prior(config, beta, ri)
    return total


def _log_prior(config: ModelConfig, beta: Beta, ri: np.ndarray) -> float:
    J = ri.size - 1
    if config.joint_error:
        return float(ig_log_density(beta.nu0, ri[0]))
    val = 0.0
    if config.signal.is_etp:
        val += float(ig_log_density(beta.nu0, ri[0]))
    if config.noise.is_etp:
        val += float(np.sum(ig_log_density(beta.nu1, ri[1:])))
    return val


def blup_f(config: ModelConfig, beta: Beta, effects: RandomEffects,
           data: BatchData, group: int) -> np.ndarray:
    """Fitted curve of one group given the scales.

    The maximizer of h0 in f_i has the closed form

        f_i = ( sum_j r_ij^{-1} I + (phi_i / r_i0) K^{-1} )^{-1}
              sum_j r_ij^{-1} y_ij,

    computed here in the equivalent K-multiplied form

        f_i = ( w K + (phi_i / r_i0) I )^{-1} K sum_j r_ij^{-1} y_ij,
        w = sum_j r_ij^{-1},

    which avoids inverting the Gram matrix.  It coincides with the
    conditional mean of f_i given the data and the scales.
    """
    g = data.groups[group]
    ri = effects.r[group]
    phi = beta.phis[group]
    K = gram_matrix(beta.thetas[group], g.X)
    w = float(np.sum(1.0 / ri[1:]))
    rhs = K @ (g.Y.T @ (1.0 / ri[1:]))
    M = w * K + (phi / ri[0]) * np.eye(g.n)
    return chol_solve(chol_pd(M), rhs)


# ---------------------------------------------------------------------------
# per-group machinery for the scale solver


class _GroupProblem:
    """Covariance, scores and curvature of one group at fixed beta."""

    def __init__(self, config: ModelConfig, beta: Beta, data: BatchData, group: int):
        g = data.groups[group]
        self.config = config
        self.beta = beta
        self.n = g.n
        self.J = g.J
        self.phi = beta.phis[group]
        self.y = g.y_stacked
        self.Yb = g.Y
        self.K = gram_matrix(beta.thetas[group], g.X)
        self.labels = free_r_labels(config, g.J)
        self.d = len(self.labels)
        self.nus = _prior_nus(config, beta, g.J)
        self.ysq = np.einsum("jn,jn->j", g.Y, g.Y)
        self.trK = float(np.trace(self.K))
        # The joint model shares one scale between the K and noise parts,
        # which breaks the low-rank split below; it keeps the dense path.
        self.dense = config.joint_error
        if self.dense:
            self.AK = np.tile(self.K, (g.J, g.J))
            self.dC = [self._partial(lab) for lab in self.labels]

    def _partial(self, label: str) -> np.ndarray:
        N = self.n * self.J
        if label == "r":
            return self.AK + self.phi * np.eye(N)
        if label == "r0":
            return self.AK
        j = int(label[1:]) - 1
        D = np.zeros((N, N))
        idx = np.arange(j * self.n, (j + 1) * self.n)
        D[idx, idx] = self.phi
        return D

    def covariance(self, r_free: np.ndarray) -> np.ndarray:
        r_full = expand_free_r(self.config, self.J, r_free)
        C = r_full[0] * np.tile(self.K, (self.J, self.J))
        idx = np.arange(self.n)
        for j in range(self.J):
            C[j * self.n + idx, j * self.n + idx] += self.phi * r_full[1 + j]
        return C

    def _fast_core(self, r_free: np.ndarray):
        """n-by-n quantities of the low-rank split of the covariance.

        For independent errors C = U(r0 K)U^T + diag(phi r_j I) with
        U = 1_J (x) I_n, so with S = I + (w/phi) r0 K, w = sum_j 1/r_j:

            log|C| = n sum_j log(phi r_j) + log|S|
            C^{-1} = D^{-1} - D^{-1} U T U^T D^{-1},  T = r0 K S^{-1}

        and everything below works with n-by-n blocks only.
        """
        r_full = expand_free_r(self.config, self.J, r_free)
        phi = self.phi
        re = r_full[1:]
        b = 1.0 / (phi * re)
        wop = float(np.sum(b))
        G = r_full[0] * self.K
        S = np.eye(self.n) + wop * G
        Ls = chol_pd(S)
        z = b @ self.Yb
        Tz = G @ chol_solve(Ls, z)
        quad = float(b @ self.ysq) - float(z @ Tz)
        logdet = self.n * float(np.sum(np.log(phi * re))) + chol_logdet(Ls)
        val = -0.5 * (self.n * self.J * LOG_2PI + logdet + quad)
        val += _log_prior(self.config, self.beta, r_full)
        return r_full, b, wop, G, Ls, Tz, val

    def value(self, r_free: np.ndarray) -> float:
        """Group contribution to h1 (Gaussian marginal plus prior)."""
        if self.dense:
            C = self.covariance(r_free)
            L = chol_pd(C)
            quad = float(self.y @ chol_solve(L, self.y))
            N = self.n * self.J
            val = -0.5 * (N * LOG_2PI + chol_logdet(L) + quad)
            r_full = expand_free_r(self.config, self.J, r_free)
            return val + _log_prior(self.config, self.beta, r_full)
        return self._fast_core(r_free)[-1]

    def score_curvature(self, r_free: np.ndarray):
        """Value, score vector, negative Hessian and a rounding scale.

        For each free scale with covariance partial C_s,

            score_s = 0.5 * (alpha^T C_s alpha - tr(Cinv C_s)) + prior'(r_s)
            B_st    = alpha^T C_s Cinv C_t alpha
                      - 0.5 tr(Cinv C_t Cinv C_s) - delta_st prior''(r_s)

        with alpha = Cinv y; the covariance is linear in the scales so no
        second covariance derivative appears.  The returned scale vector
        bounds the floating-point noise floor of each score component.
        """
        if self.dense:
            return self._score_curvature_dense(r_free)
        return self._score_curvature_fast(r_free)

    def _score_curvature_dense(self, r_free: np.ndarray):
        C = self.covariance(r_free)
        L = chol_pd(C)
        Cinv = chol_inv(L)
        alpha = Cinv @ self.y
        quad = float(self.y @ alpha)
        N = self.n * self.J
        val = -0.5 * (N * LOG_2PI + chol_logdet(L) + quad)
        r_full = expand_free_r(self.config, self.J, r_free)
        val += _log_prior(self.config, self.beta, r_full)

        g = np.empty(self.d)
        scale = np.empty(self.d)
        vs = []
        Ms = []
        for s, dC in enumerate(self.dC):
            v = dC @ alpha
            tr = float(np.vdot(Cinv, dC))
            a_quad = float(alpha @ v)
            pr = ig_score(self.nus[s], r_free[s])
            g[s] = 0.5 * (a_quad - tr) + pr
            scale[s] = 0.5 * (abs(a_quad) + abs(tr)) + abs(pr) + abs(
                (self.nus[s] - 1.0) / r_free[s] ** 2)
            vs.append(v)
            Ms.append(Cinv @ dC)
        B = np.empty((self.d, self.d))
        ws = [Cinv @ v for v in vs]
        for s in range(self.d):
            for t in range(s, self.d):
                gauss = float(vs[s] @ ws[t]) - 0.5 * float(
                    np.einsum("ab,ba->", Ms[t], Ms[s]))
                B[s, t] = B[t, s] = gauss
            B[s, s] -= ig_curvature(self.nus[s], r_free[s])
        return val, g, B, scale

    def _score_curvature_fast(self, r_free: np.ndarray):
        """Same contract as the dense version, on the low-rank split.

        Writing b_j = 1/(phi r_j), T as in ``_fast_core`` and
        R = I - (w/phi)T, the needed pieces reduce to n-by-n algebra:

            alpha_j                 = b_j (y_j - T z)
            alpha^T (A(x)K) alpha   = a^T K a,   a = sum_j alpha_j
            tr(Cinv (A(x)K))        = (w/phi) tr(R K)
            tr(Cinv)_jj blocks      -> n/r_j - tr(T)/(phi r_j^2) per curve

        with the curvature entries assembled from tr(T), tr(T^2),
        alpha_j^T T alpha_k, and K- and R-weighted traces.
        """
        r_full, b, wop, G, Ls, Tz, val = self._fast_core(r_free)
        n = self.n
        phi = self.phi
        re = r_full[1:]
        Tm = chol_solve(Ls, G)
        Tm = 0.5 * (Tm + Tm.T)
        trT = float(np.trace(Tm))
        trT2 = float(np.sum(Tm * Tm))
        A = b[:, None] * (self.Yb - Tz[None, :])
        sqn_a = np.einsum("jn,jn->j", A, A)
        TA = A @ Tm

        has_r0 = self.labels and self.labels[0] == "r0"
        noise_free = self.labels and self.labels[-1] != "r0"

        g = np.empty(self.d)
        scale = np.empty(self.d)
        B = np.empty((self.d, self.d))
        k0 = 1 if has_r0 else 0

        if has_r0:
            a = A.sum(axis=0)
            Ka = self.K @ a
            a_quad = float(a @ Ka)
            trTK = float(np.sum(Tm * self.K))
            tr0 = wop * (self.trK - wop * trTK)
            pr = ig_score(self.nus[0], r_free[0])
            g[0] = 0.5 * (a_quad - tr0) + pr
            scale[0] = 0.5 * (abs(a_quad) + abs(tr0)) + abs(pr) + abs(
                (self.nus[0] - 1.0) / r_free[0] ** 2)
            R = -wop * Tm
            R[np.diag_indices(n)] += 1.0
            RKa = R @ Ka
            RK = R @ self.K
            B[0, 0] = wop * float(Ka @ RKa) - 0.5 * wop ** 2 * float(
                np.sum(RK * RK.T))

        if noise_free:
            aq = phi * sqn_a
            trn = n / re - trT / (phi * re ** 2)
            prn = ig_score(self.nus[k0], re)
            g[k0:] = 0.5 * (aq - trn) + prn
            scale[k0:] = 0.5 * (np.abs(aq) + np.abs(trn)) + np.abs(prn) + np.abs(
                (self.nus[k0] - 1.0) / re ** 2)
            M2 = A @ TA.T
            inv_re2 = 1.0 / (phi * re ** 2)
            gauss = -M2 / np.outer(re, re) - 0.5 * trT2 * np.outer(inv_re2, inv_re2)
            gauss[np.diag_indices(self.J)] += (
                phi * sqn_a / re - 0.5 * (n / re ** 2 - 2.0 * trT / (phi * re ** 3)))
            B[k0:, k0:] = gauss
            if has_r0:
                RA = A - wop * TA
                cross = (RA @ Ka) / re - 0.5 * float(
                    np.sum(self.K * (R @ R))) / (phi * re ** 2)
                B[0, 1:] = cross
                B[1:, 0] = cross

        for s in range(self.d):
            B[s, s] -= ig_curvature(self.nus[s], r_free[s])
        return val, g, B, scale

    # -- solvers ----------------------------------------------------------

    def solve(self, init_free: np.ndarray, tol: float, max_iter: int):
        """Maximize the group h1 over its free scales.

        Damped Newton in u = log(r); if the line search stalls or the
        iteration budget runs out, finish with bracketed scalar root
        finding, one score component at a time.  The iteration aims three
        digits below ``tol`` so downstream finite differences stay clean,
        but a stall at the floating-point noise floor of the scores is
        accepted as soon as ``tol`` itself is met.
        """
        if self.d == 0:
            return np.empty(0), {"iterations": 0, "score_inf": 0.0, "fallback": False}
        r = np.asarray(init_free, dtype=float).copy()
        info = {"iterations": 0, "score_inf": math.nan, "fallback": False}
        eps = np.finfo(float).eps
        best = math.inf
        stall = 0
        for _ in range(max_iter):
            val, g, B, scale = self.score_curvature(r)
            ginf = float(np.max(np.abs(g)))
            info["score_inf"] = ginf
            aspire = max(tol * 1e-3, 16.0 * eps * float(np.max(scale)))
            if ginf <= aspire:
                return r, info
            # The scale-based floor estimate is optimistic on some
            # geometries; once the score stops shrinking the iteration is
            # churning on rounding noise, so stop as soon as the contract
            # tolerance holds.
            if ginf < 0.5 * best:
                best = ginf
                stall = 0
            else:
                stall += 1
                if stall >= 3 and ginf <= tol:
                    return r, info
            info["iterations"] += 1
            step = self._newton_step(r, g, B)
            r_new, ok = self._line_search(r, val, g, step)
            if not ok:
                if ginf <= tol:
                    return r, info
                break
            if np.array_equal(r_new, r):
                # the accepted step vanished in rounding; nothing can change
                if ginf <= tol:
                    return r, info
                break
            r = r_new
        # Newton did not finish; polish coordinatewise.
        info["fallback"] = True
        r = self._coordinate_polish(r, tol)
        _, g, _, _ = self.score_curvature(r)
        info["score_inf"] = float(np.max(np.abs(g)))
        if info["score_inf"] > tol:
            raise EstimationError(
                "scale solver did not converge", last_r=r,
                diagnostics={"score_inf": info["score_inf"], "tol": tol})
        return r, info

    def _newton_step(self, r, g, B):
        """Ascent direction in u = log(r) coordinates."""
        grad_u = g * r
        negH = B * np.outer(r, r) - np.diag(grad_u)
        ridge = 0.0
        base = max(float(np.max(np.abs(np.diag(negH)))), 1.0)
        for _ in range(12):
            try:
                L = np.linalg.cholesky(negH + ridge * np.eye(self.d))
                step = chol_solve(L, grad_u)
                if float(step @ grad_u) > 0:
                    return step
            except np.linalg.LinAlgError:
                pass
            ridge = max(ridge * 10.0, 1e-8 * base)
        # steepest ascent as a last resort
        return grad_u / max(float(np.max(np.abs(grad_u))), 1.0)

    def _line_search(self, r, val, g, step):
        u = np.log(r)
        grad_u = g * r
        # keep single steps bounded in log space
        cap = float(np.max(np.abs(step)))
        if cap > 10.0:
            step = step * (10.0 / cap)
        slope = float(grad_u @ step)
        if slope <= 0:
            step = grad_u.copy()
            slope = float(grad_u @ grad_u)
            if slope == 0.0:
                return r, False
        t = 1.0
        for _ in range(45):
            try:
                cand = np.exp(u + t * step)
                new_val = self.value(cand)
            except NumericError:
                new_val = -np.inf
            if np.isfinite(new_val) and new_val >= val + 1e-4 * t * slope:
                return cand, True
            t *= 0.5
        return r, False

    def _coordinate_polish(self, r_start, tol):
        r = r_start.copy()
        eps = np.finfo(float).eps

        def comp_score(s, x):
            rr = r.copy()
            rr[s] = x
            _, g, _, _ = self.score_curvature(rr)
            return g[s]

        for _ in range(40):
            for s in range(self.d):
                f0 = comp_score(s, r[s])
                if abs(f0) <= tol * 1e-3:
                    continue
                lo = hi = r[s]
                if f0 > 0:
                    hi = r[s]
                    for _ in range(120):
                        hi *= 2.0
                        if comp_score(s, hi) < 0:
                            break
                    else:
                        raise NumericError("no upper bracket for a scale score")
                else:
                    lo = r[s]
                    for _ in range(120):
                        lo *= 0.5
                        if comp_score(s, lo) > 0:
                            break
                    else:
                        raise NumericError("no lower bracket for a scale score")
                r[s] = brentq(lambda x, s=s: comp_score(s, x), lo, hi,
                              xtol=1e-14, rtol=4 * eps)
            _, g, _, _ = self.score_curvature(r)
            if float(np.max(np.abs(g))) <= tol:
                break
        return r


# ---------------------------------------------------------------------------
# public likelihood surface


def h1_value(config: ModelConfig, beta: Beta, effects: RandomEffects,
             data: BatchData) -> float:
    """Scale-level log likelihood: Gaussian marginal of y plus scale prior."""
    total = 0.0
    for i in range(data.I):
        prob = _GroupProblem(config, beta, data, i)
        total += prob.value(extract_free_r(config, effects.r[i]))
    return total


def r_scores(config: ModelConfig, beta: Beta, effects: RandomEffects,
             data: BatchData, group: int) -> np.ndarray:
    """Analytic score of h1 in each free scale of one group.

    Component order follows :func:`model.free_r_labels`; the vector is
    empty when the model has no free scales.
    """
    prob = _GroupProblem(config, beta, data, group)
    _, g, _, _ = prob.score_curvature(extract_free_r(config, effects.r[group]))
    return g


def solve_r(config: ModelConfig, beta: Beta, data: BatchData, init=None, *,
            tol: float = 1e-8, max_iter: int = 200):
    """Solve the score equations for all free scales, group by group.

    ``init`` is a RandomEffects starting point (all ones by default; the
    fit loop warm-starts from the previous outer evaluation but reports
    final effects solved from the default start, keeping the returned
    r_hat a pure function of beta).  Returns the solved effects and a
    diagnostics dict.
    """
    if init is None:
        init = RandomEffects.ones(data)
    rs = []
    info = {"iterations": 0, "score_inf": 0.0, "fallbacks": 0}
    for i in range(data.I):
        prob = _GroupProblem(config, beta, data, i)
        r_free, gi = prob.solve(extract_free_r(config, init.r[i]), tol, max_iter)
        rs.append(expand_free_r(config, data.groups[i].J, r_free))
        info["iterations"] += gi["iterations"]
        info["score_inf"] = max(info["score_inf"], gi["score_inf"])
        info["fallbacks"] += int(gi["fallback"])
    return RandomEffects(r=tuple(rs)), info


def laplace_B(config: ModelConfig, beta: Beta, r_hat: RandomEffects,
              data: BatchData) -> np.ndarray:
    """Negative Hessian of h1 over all free scales at r_hat.

    Block diagonal across groups (groups share no scales); within a group
    the blocks follow :func:`model.free_r_labels` order.
    """
    blocks = []
    for i in range(data.I):
        prob = _GroupProblem(config, beta, data, i)
        if prob.d == 0:
            continue
        _, _, B, _ = prob.score_curvature(extract_free_r(config, r_hat.r[i]))
        blocks.append(B)
    if not blocks:
        return np.empty((0, 0))
    dim = sum(b.shape[0] for b in blocks)
    out = np.zeros((dim, dim))
    k = 0
    for b in blocks:
        out[k:k + b.shape[0], k:k + b.shape[0]] = b
        k += b.shape[0]
    return out


def adjusted_profile_m(config: ModelConfig, beta: Beta, data: BatchData, *,
                       inner_tol: float = 1e-8, max_inner: int = 200,
                       init: RandomEffects | None = None):
    """Adjusted profile likelihood m(beta), with r_hat and diagnostics.

        m = h1(beta, r_hat) + (d/2) log(2 pi) - 0.5 log |B|

    where d counts the free scales.  With no free scales m is the exact
    Gaussian log marginal.  An indefinite B (a saddle rather than a peak)
    is flagged in the diagnostics and |det B| is used, not treated as
    fatal.  ``init`` warm-starts the scale solver (all ones by default);
    the solver converges far below ``inner_tol``, so the returned value is
    start-independent up to that termination jitter whenever both starts
    lie in the basin of the same score root.
    """
    total = 0.0
    rs = []
    info = {"iterations": 0, "score_inf": 0.0, "fallbacks": 0, "b_indefinite": False}
    for i in range(data.I):
        prob = _GroupProblem(config, beta, data, i)
        r0_free = (np.ones(prob.d) if init is None
                   else extract_free_r(config, init.r[i]))
        r_free, gi = prob.solve(r0_free, inner_tol, max_inner)
        info["iterations"] += gi["iterations"]
        info["score_inf"] = max(info["score_inf"], gi["score_inf"])
        info["fallbacks"] += int(gi["fallback"])
        rs.append(expand_free_r(config, data.groups[i].J, r_free))
        if prob.d == 0:
            total += prob.value(r_free)
            continue
        val, _, B, _ = prob.score_curvature(r_free)
        sign, logabsdet = np.linalg.slogdet(B)
        if sign <= 0:
            info["b_indefinite"] = True
        total += val + 0.5 * prob.d * LOG_2PI - 0.5 * logabsdet
    require_finite("adjusted profile likelihood", np.array([total]))
    return total, RandomEffects(r=tuple(rs)), info


# ---------------------------------------------------------------------------
# beta packing and initialization


def _nu_flags(config: ModelConfig) -> tuple[bool, bool]:
    est = config.nu_mode == NU_MODE_ESTIMATED
    nu0_free = est and config.signal.is_etp
    nu1_free = est and config.noise.is_etp and not config.joint_error
    return nu0_free, nu1_free


def pack_beta(config: ModelConfig, beta: Beta) -> np.ndarray:
    """Flatten beta into the unconstrained outer-optimizer vector.

    Layout: per-group kernel log parameters (see KernelParams.to_log),
    then log(phi_1..I), then log(nu0 - floor) and log(nu1 - floor) for
    whichever tail indices are estimated.
    """
    parts = [th.to_log() for th in beta.thetas]
    parts.append(np.log(np.asarray(beta.phis)))
    nu0_free, nu1_free = _nu_flags(config)
    if nu0_free:
        parts.append(np.array([math.log(beta.nu0 - NU_FLOOR)]))
    if nu1_free:
        parts.append(np.array([math.log(beta.nu1 - NU_FLOOR)]))
    return np.concatenate(parts)


def unpack_beta(config: ModelConfig, template: Beta, u: np.ndarray) -> Beta:
    """Inverse of :func:`pack_beta`; the template fixes shapes and fixed nus."""
    u = np.asarray(u, dtype=float)
    thetas = []
    k = 0
    for th in template.thetas:
        m = th.n_free
        thetas.append(KernelParams.from_log(u[k:k + m]))
        k += m
    I = len(template.phis)
    phis = tuple(np.exp(u[k:k + I]))
    k += I
    nu0_free, nu1_free = _nu_flags(config)
    nu0 = template.nu0
    nu1 = template.nu1
    if nu0_free:
        nu0 = NU_FLOOR + math.exp(u[k])
        k += 1
    if nu1_free:
        nu1 = NU_FLOOR + math.exp(u[k])
        k += 1
    if config.joint_error:
        nu1 = nu0
    if k != u.size:
        raise InputError("parameter vector length does not match the model")
    return Beta(thetas=tuple(thetas), phis=phis, nu0=nu0, nu1=nu1)


def default_init(config: ModelConfig, data: BatchData) -> Beta:
    """Moment-based starting values.

    Half the response variance goes to the signal, half to the noise; the
    inverse squared length-scale starts at the reciprocal median squared
    distance between design points, and the linear weights start small.
    """
    thetas = []
    phis = []
    for g in data.groups:
        v = max(float(np.var(g.Y)), 1e-8)
        eta = np.empty(g.p)
        for l in range(g.p):
            diff2 = (g.X[:, l][:, None] - g.X[:, l][None, :]) ** 2
            pairs = diff2[np.triu_indices(g.n, k=1)]
            med = float(np.median(pairs)) if pairs.size else 0.0
            eta[l] = 1.0 / med if med > 0 else 1.0
        thetas.append(KernelParams(theta0=v / 2.0, eta=eta, xi=np.full(g.p, 1e-3)))
        phis.append(v / 2.0)
    nu0 = max(config.nu0, NU_FLOOR) if config.signal.is_etp else None
    nu1 = max(config.nu1, NU_FLOOR) if config.noise.is_etp else None
    if config.joint_error:
        nu1 = nu0
    return Beta(thetas=tuple(thetas), phis=tuple(phis), nu0=nu0, nu1=nu1)


# ---------------------------------------------------------------------------
# outer fit


def _validate_fit_inputs(config: ModelConfig, data: BatchData) -> None:
    if config.I != data.I:
        raise InputError(
            f"config has {config.I} groups but the data has {data.I}")
    if config.nu_mode == NU_MODE_ESTIMATED:
        if data.I == 1 and data.groups[0].J == 1:
            raise InputError(
                "tail indices are not estimable from a single curve; "
                "fix them instead")


def fit(config: ModelConfig, data: BatchData, options: FitOptions | None = None) -> FitResult:
    """Maximize the adjusted profile likelihood over beta.

    The inner scale solver is run three digits tighter than
    ``options.inner_tol`` so that finite differences of m across nearby
    beta values are not polluted by inner-solve noise, and is warm-started
    from the previous outer evaluation along the optimizer's trajectory
    (the reported effects come from a final solve at beta_hat from the
    default start).  Convergence of the outer loop is declared when the
    optimizer reports success and the final finite-difference gradient
    satisfies ``max |dm/dbeta| <= outer_tol * (1 + |m|)``; otherwise the
    stop is re-polished, then rescued by a derivative-free simplex pass,
    and finally up to ``multi_start`` perturbed restarts are tried before
    failing.
    """
    if options is None:
        options = FitOptions()
    _validate_fit_inputs(config, data)
    beta0 = options.init_beta if options.init_beta is not None else default_init(config, data)
    if len(beta0.thetas) != data.I:
        raise InputError("init_beta group count does not match the data")
    if config.signal.is_etp and beta0.nu0 is None:
        raise InputError("the model has an ETP signal but init_beta.nu0 is missing")
    if config.noise.is_etp and not config.joint_error and beta0.nu1 is None:
        raise InputError("the model has ETP errors but init_beta.nu1 is missing")

    diag = Diagnostics()
    inner_tol_eff = options.inner_tol
    cache: dict[bytes, float] = {}
    # Warm-start holder for the inner scale solver.  Consecutive outer
    # evaluations sit at nearby beta, so the previous root is a far better
    # start than all-ones (it cuts inner Newton work by an order of
    # magnitude); the solver's own tolerance keeps the value independent
    # of the start up to its termination jitter.  A failed warm solve is
    # retried cold before giving up on the point.
    warm: list[RandomEffects | None] = [None]

    def m_of(u: np.ndarray) -> float:
        beta = unpack_beta(config, beta0, u)
        try:
            val, effects, info = adjusted_profile_m(
                config, beta, data, inner_tol=inner_tol_eff,
                max_inner=options.max_inner, init=warm[0])
        except (NumericError, EstimationError):
            if warm[0] is None:
                raise
            warm[0] = None
            val, effects, info = adjusted_profile_m(
                config, beta, data, inner_tol=inner_tol_eff,
                max_inner=options.max_inner)
        warm[0] = effects
        diag.inner_iterations_total += info["iterations"]
        diag.inner_fallbacks += info["fallbacks"]
        if info["b_indefinite"]:
            diag.b_indefinite = True
        return val

    # Best feasible point seen anywhere in this fit, finite-difference
    # probes included; the rescue stage below starts from it.
    seen: list[tuple[float, np.ndarray] | None] = [None]

    def neg_m(u: np.ndarray) -> float:
        diag.m_evaluations += 1
        try:
            val = m_of(u)
        except (NumericError, EstimationError):
            return _BAD_OBJECTIVE
        if not np.isfinite(val):
            return _BAD_OBJECTIVE
        if seen[0] is None or val > seen[0][0]:
            seen[0] = (val, np.array(u, dtype=float, copy=True))
        if len(cache) > 4096:
            cache.clear()
        cache[u.tobytes()] = val
        return -val

    def callback(uk: np.ndarray) -> None:
        if options.track_path:
            got = cache.get(np.asarray(uk).tobytes())
            if got is not None:
                diag.path.append(got)

    u0 = pack_beta(config, beta0)
    try:
        scale = 1.0 + abs(m_of(u0))
    except (NumericError, EstimationError):
        scale = 1.0
        diag.messages.append("initial point failed to evaluate")
    bounds = [(-_LOG_BOUND, _LOG_BOUND)] * u0.size

    rng = np.random.default_rng(options.seed)
    best_ok = None
    best_any = None
    starts = [u0]
    for _ in range(max(0, options.multi_start)):
        starts.append(u0 + rng.normal(0.0, 0.5, size=u0.size))

    for attempt, u_init in enumerate(starts):
        warm[0] = None  # a perturbed restart lands far from the last root
        res = minimize(neg_m, u_init, method="L-BFGS-B", bounds=bounds,
                       callback=callback, jac="3-point",
                       options={"maxiter": options.max_outer,
                                "finite_diff_rel_step": options.fd_step,
                                "gtol": options.outer_tol * scale,
                                "ftol": 1e-11})
        diag.outer_iterations += int(res.nit)
        diag.starts_used = attempt + 1
        m_best = -res.fun
        if not np.isfinite(m_best) or m_best <= -_BAD_OBJECTIVE / 2:
            diag.messages.append(f"start {attempt}: objective stayed non-finite")
            continue
        grad_inf = _fd_grad_inf(neg_m, res.x, options.fd_step)
        gate = options.outer_tol * (1.0 + abs(m_best))
        ok = grad_inf <= gate
        # Restart from the stop when the gate fails: the first pass scaled
        # its gradient tolerance at the starting point (looser than the
        # contract at the optimum when the objective magnitude shrank),
        # and a quasi-Newton state gone stale can stall a line search at a
        # smooth point with a large true gradient.  A fresh state fixes
        # both.
        polish = 0
        while not ok and polish < 2:
            res = minimize(neg_m, res.x, method="L-BFGS-B", bounds=bounds,
                           callback=callback, jac="3-point",
                           options={"maxiter": options.max_outer,
                                    "finite_diff_rel_step": options.fd_step,
                                    "gtol": 0.3 * gate,
                                    "ftol": 1e-14})
            diag.outer_iterations += int(res.nit)
            m_best = -res.fun
            grad_inf = _fd_grad_inf(neg_m, res.x, options.fd_step)
            gate = options.outer_tol * (1.0 + abs(m_best))
            ok = np.isfinite(m_best) and grad_inf <= gate
            polish += 1
        if not ok:
            # An abnormal line-search stop means the finite-difference
            # gradient is unreliable right where the optimizer sits, so
            # restarting there keeps failing.  Walk out without gradients
            # (downhill simplex from the best point seen so far), then
            # hand the endpoint back to the quasi-Newton pass and re-check.
            u_from = res.x
            if seen[0] is not None and seen[0][0] > m_best:
                u_from = seen[0][1]
            nm = minimize(neg_m, u_from, method="Nelder-Mead", bounds=bounds,
                          options={"maxiter": 4000, "maxfev": 4000,
                                   "xatol": 1e-8, "fatol": 1e-12})
            pol = minimize(neg_m, nm.x, method="L-BFGS-B", bounds=bounds,
                           callback=callback, jac="3-point",
                           options={"maxiter": options.max_outer,
                                    "finite_diff_rel_step": options.fd_step,
                                    "gtol": 0.3 * options.outer_tol * (1.0 + abs(float(nm.fun))),
                                    "ftol": 1e-14})
            diag.outer_iterations += int(pol.nit)
            res = pol if pol.fun <= nm.fun else nm
            m_best = -res.fun
            grad_inf = _fd_grad_inf(neg_m, res.x, options.fd_step)
            gate = options.outer_tol * (1.0 + abs(m_best))
            ok = np.isfinite(m_best) and grad_inf <= gate
            diag.messages.append(
                f"start {attempt}: simplex rescue; m={m_best:.6f}"
                f" grad_inf={grad_inf:.3e}")
        diag.messages.append(
            f"start {attempt}: {res.message if isinstance(res.message, str) else res.message!r};"
            f" m={m_best:.6f} grad_inf={grad_inf:.3e}")
        record = (res.x.copy(), m_best, grad_inf, ok)
        if ok and (best_ok is None or m_best > best_ok[1]):
            best_ok = record
        if best_any is None or m_best > best_any[1]:
            best_any = record
        if ok:
            break

    best = best_ok if best_ok is not None else best_any
    if best is None:
        raise EstimationError("all fit attempts failed numerically",
                              last_beta=beta0, diagnostics=diag)
    u_hat, _, grad_inf, ok = best
    diag.final_grad_inf = float(grad_inf)
    diag.converged = bool(ok)
    if not ok:
        raise EstimationError(
            f"outer optimizer did not reach the gradient tolerance "
            f"(|grad|_inf = {grad_inf:.3e})",
            last_beta=unpack_beta(config, beta0, u_hat), diagnostics=diag)

    beta_hat = unpack_beta(config, beta0, u_hat)
    m_value, r_hat, info = adjusted_profile_m(
        config, beta_hat, data, inner_tol=inner_tol_eff, max_inner=options.max_inner)
    diag.final_inner_score_inf = info["score_inf"]
    f_hat = tuple(blup_f(config, beta_hat, r_hat, data, i) for i in range(data.I))
    B = laplace_B(config, beta_hat, r_hat, data)
    H_in = tuple(
        _corrected_cov_group(config, beta_hat, r_hat, f_hat[i], data, i,
                             messages=diag.messages)
        for i in range(data.I))
    return FitResult(config=config, data=data, beta_hat=beta_hat, r_hat=r_hat,
                     f_hat=f_hat, B=B, H_in=H_in, m_value=m_value,
                     diagnostics=diag)


def _fd_grad_inf(neg_m, u: np.ndarray, eps: float) -> float:
    # Verification measurement: central differences with a step
    # comfortably above the objective's noise floor (the profiled
    # objective is only reproducible to roughly the inner solver's
    # termination jitter), scaled per coordinate like the optimizer's.
    worst = 0.0
    for k in range(u.size):
        h = max(eps, 1e-5) * max(1.0, abs(u[k]))
        up = u.copy()
        up[k] += h
        dn = u.copy()
        dn[k] -= h
        worst = max(worst, abs((neg_m(up) - neg_m(dn)) / (2.0 * h)))
    return worst


# ---------------------------------------------------------------------------
# curvature-corrected covariance at the training inputs


def _corrected_cov_group(config: ModelConfig, beta: Beta, effects: RandomEffects,
                         f_i: np.ndarray, data: BatchData, group: int,
                         messages: list | None = None) -> np.ndarray:
    """Leading block of the inverse negative h0 Hessian over (f_i, r_i).

    The joint curvature of h0 in the latent curve and the group's free
    scales is assembled at the fitted values; inverting it and keeping the
    curve block widens the plug-in conditional covariance by exactly the
    uncertainty of the estimated scales (a Schur-complement argument shows
    the widening is never negative while the joint curvature is positive
    definite).  The fitted scales maximize the adjusted profile rather than
    h0 itself, so with a signal scale tied to a nearly singular kernel the
    joint curvature can lose definiteness; in that case the correction is
    undefined and the plug-in conditional covariance is returned instead
    (noted in ``messages`` when a sink is supplied).
    """
    g = data.groups[group]
    n, J = g.n, g.J
    phi = beta.phis[group]
    ri = effects.r[group]
    K = gram_matrix(beta.thetas[group], g.X)
    Kinv = chol_inv(chol_kernel(K))
    labels = free_r_labels(config, J)
    nus = _prior_nus(config, beta, J)
    d = len(labels)

    M = np.zeros((n + d, n + d))
    w = float(np.sum(1.0 / ri[1:]))
    M[:n, :n] = (w / phi) * np.eye(n) + Kinv / ri[0]

    Kinv_f = Kinv @ f_i
    quad_f = float(f_i @ Kinv_f)
    for s, lab in enumerate(labels):
        col = n + s
        if lab == "r":
            r = ri[0]
            resid_sum = np.sum(g.Y - f_i, axis=0)
            M[:n, col] = -Kinv_f / r ** 2 + resid_sum / (phi * r ** 2)
            diag_val = (-(n / (2.0 * r ** 2)) + quad_f / r ** 3)
            for j in range(J):
                ssq = float(np.sum((g.Y[j] - f_i) ** 2))
                diag_val += -(n / (2.0 * r ** 2)) + ssq / (phi * r ** 3)
            M[col, col] = diag_val - ig_curvature(nus[s], r)
        elif lab == "r0":
            r0 = ri[0]
            M[:n, col] = -Kinv_f / r0 ** 2
            M[col, col] = (-(n / (2.0 * r0 ** 2)) + quad_f / r0 ** 3
                           - ig_curvature(nus[s], r0))
        else:
            j = int(lab[1:]) - 1
            rj = ri[1 + j]
            resid = g.Y[j] - f_i
            M[:n, col] = resid / (phi * rj ** 2)
            ssq = float(resid @ resid)
            M[col, col] = (-(n / (2.0 * rj ** 2)) + ssq / (phi * rj ** 3)
                           - ig_curvature(nus[s], rj))
        M[col, :n] = M[:n, col]

    if d == 0:
        return chol_inv(chol_pd(M))
    # Schur complement in the curve block: equals the leading block of M^{-1}.
    M_ff = M[:n, :n]
    M_fr = M[:n, n:]
    M_rr = M[n:, n:]
    try:
        rr_chol = chol_pd(0.5 * (M_rr + M_rr.T))
        S = M_ff - M_fr @ chol_solve(rr_chol, M_fr.T)
        return chol_inv(chol_pd(0.5 * (S + S.T)))
    except NumericError:
        if messages is not None:
            messages.append(
                f"group {group}: joint (curve, scale) curvature is not "
                "positive definite; falling back to the plug-in conditional "
                "covariance")
        return chol_inv(chol_pd(0.5 * (M_ff + M_ff.T)))


def corrected_covariance_Hin(fit_result: FitResult, group: int) -> np.ndarray:
    """Curvature-corrected covariance of the fitted curve of one group."""
    if not (0 <= group < fit_result.data.I):
        raise InputError(f"group index {group} out of range")
    return _corrected_cov_group(fit_result.config, fit_result.beta_hat,
                                fit_result.r_hat, fit_result.f_hat[group],
                                fit_result.data, group)

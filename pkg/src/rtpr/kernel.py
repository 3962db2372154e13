"""Squared-exponential-plus-linear covariance kernel.

The kernel acting on covariate vectors u, v in R^p is

    k(u, v) = theta0 * exp(-0.5 * sum_l eta_l * (u_l - v_l)^2)
              + sum_l xi_l * u_l * v_l

with signal variance theta0 > 0, inverse squared length-scales eta_l > 0
and linear weights xi_l >= 0.  The linear term lets fitted curves keep a
trend outside the data range instead of decaying to the prior mean.

Optimizers work on an unconstrained vector: log(theta0), log(eta_l) and
log(xi_l + XI_FLOOR).  The floor keeps the map bijective when a linear
weight is switched off.  ``gram_gradients`` returns derivatives in that
internal parameterization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError

# Lower bound added to xi before taking logs, so xi = 0 stays representable.
XI_FLOOR = 1e-12

# Relative diagonal jitter used before factorizing kernel Gram matrices.
JITTER_SCALE = 1e-8


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of the squared-exponential-plus-linear kernel.

    Parameters
    ----------
    theta0 : float
        Signal variance of the exponential part, > 0.
    eta : array_like, shape (p,)
        Inverse squared length-scales, all > 0.
    xi : array_like, shape (p,)
        Weights of the linear term, all >= 0.
    """

    theta0: float
    eta: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        eta = np.atleast_1d(np.asarray(self.eta, dtype=float)).copy()
        xi = np.atleast_1d(np.asarray(self.xi, dtype=float)).copy()
        eta.setflags(write=False)
        xi.setflags(write=False)
        object.__setattr__(self, "theta0", float(self.theta0))
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "xi", xi)
        if eta.ndim != 1 or eta.shape != xi.shape:
            raise InputError("eta and xi must be 1-d arrays of the same length")
        if not np.isfinite(self.theta0) or self.theta0 <= 0.0:
            raise InputError("theta0 must be positive and finite")
        if not (np.all(np.isfinite(eta)) and np.all(eta > 0.0)):
            raise InputError("all eta entries must be positive and finite")
        if not (np.all(np.isfinite(xi)) and np.all(xi >= 0.0)):
            raise InputError("all xi entries must be non-negative and finite")

    @property
    def p(self) -> int:
        """Covariate dimension."""
        return self.eta.shape[0]

    @property
    def n_free(self) -> int:
        """Number of free parameters (1 + 2p)."""
        return 1 + 2 * self.p

    def to_log(self) -> np.ndarray:
        """Pack into the internal unconstrained vector.

        Layout: ``[log theta0, log eta_1..p, log(xi_1..p + XI_FLOOR)]``.
        """
        return np.concatenate(
            ([np.log(self.theta0)], np.log(self.eta), np.log(self.xi + XI_FLOOR))
        )

    @staticmethod
    def from_log(u) -> "KernelParams":
        """Inverse of :meth:`to_log`."""
        u = np.asarray(u, dtype=float)
        if u.ndim != 1 or u.size < 3 or u.size % 2 == 0:
            raise InputError("log parameter vector must have odd length >= 3")
        p = (u.size - 1) // 2
        xi = np.exp(u[1 + p:]) - XI_FLOOR
        return KernelParams(
            theta0=float(np.exp(u[0])),
            eta=np.exp(u[1:1 + p]),
            xi=np.maximum(xi, 0.0),
        )


def free_param_names(p: int) -> list[str]:
    """Names of the internal kernel parameters, matching ``to_log`` order."""
    names = ["log_theta0"]
    names += [f"log_eta{l + 1}" for l in range(p)]
    names += [f"u_xi{l + 1}" for l in range(p)]
    return names


def _as_design(X, p=None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise InputError("design must be a 2-d array (n, p)")
    if p is not None and X.shape[1] != p:
        raise InputError(
            f"design has {X.shape[1]} columns, kernel expects {p}"
        )
    if not np.all(np.isfinite(X)):
        raise InputError("design contains non-finite values")
    return X


def eval_kernel(params: KernelParams, u, v) -> float:
    """Evaluate k(u, v) for a single pair of covariate vectors."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if u.shape != v.shape or u.shape != (params.p,):
        raise InputError("u and v must both have the kernel's dimension")
    d2 = np.sum(params.eta * (u - v) ** 2)
    # xi * (u v) keeps the evaluation exactly symmetric in (u, v)
    return float(params.theta0 * np.exp(-0.5 * d2) + np.sum(params.xi * (u * v)))


def _se_part(params: KernelParams, X, Z=None) -> np.ndarray:
    """theta0 * exp(-0.5 sum eta (x-z)^2), for all pairs (rows of X, rows of Z)."""
    if Z is None:
        Z = X
    # (n, m) weighted squared distances accumulated per dimension
    d2 = np.zeros((X.shape[0], Z.shape[0]))
    for l in range(X.shape[1]):
        d2 += params.eta[l] * (X[:, l][:, None] - Z[:, l][None, :]) ** 2
    return params.theta0 * np.exp(-0.5 * d2)


def _linear_part(params: KernelParams, X, Z=None) -> np.ndarray:
    if Z is None:
        Z = X
    return (X * params.xi) @ Z.T


def gram_matrix(params: KernelParams, X) -> np.ndarray:
    """Gram matrix K with K[a, b] = k(x_a, x_b).

    Returns the exact Gram matrix; it is symmetric positive semi-definite
    up to rounding.  Factorizations should go through :func:`add_jitter`
    (the module-wide policy) rather than this raw matrix.
    """
    X = _as_design(X, params.p)
    K = _se_part(params, X) + _linear_part(params, X)
    # exact symmetry, cheap insurance against rounding asymmetry
    return 0.5 * (K + K.T)


def cross_matrix(params: KernelParams, Z, X) -> np.ndarray:
    """Cross-covariance matrix with entry [t, a] = k(z_t, x_a)."""
    X = _as_design(X, params.p)
    Z = _as_design(Z, params.p)
    return _se_part(params, Z, X) + _linear_part(params, Z, X)


def cross_vector(params: KernelParams, z, X) -> np.ndarray:
    """Vector of covariances k(z, x_a) between one point z and rows of X."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    return cross_matrix(params, z[None, :], X)[0]


def add_jitter(K: np.ndarray) -> np.ndarray:
    """Return K plus the standard diagonal jitter.

    The jitter is ``JITTER_SCALE * mean(diag(K))``, a fixed relative amount
    added before any factorization of a kernel Gram matrix.
    """
    K = np.asarray(K, dtype=float)
    j = JITTER_SCALE * float(np.mean(np.diag(K)))
    return K + j * np.eye(K.shape[0])


def gram_gradients(params: KernelParams, X) -> dict[str, np.ndarray]:
    """Derivatives of the Gram matrix in the internal parameterization.

    Returns a dict keyed by :func:`free_param_names`:

    - ``log_theta0`` : dK / d log(theta0)  (the SE part itself)
    - ``log_etaL``   : dK / d log(eta_L)
    - ``u_xiL``      : dK / d log(xi_L + XI_FLOOR)

    Dividing ``u_xiL`` by ``xi_L + XI_FLOOR`` recovers the natural-scale
    derivative, the outer product of covariate column L with itself.
    """
    X = _as_design(X, params.p)
    S = _se_part(params, X)
    grads: dict[str, np.ndarray] = {"log_theta0": S}
    for l in range(params.p):
        d2_l = (X[:, l][:, None] - X[:, l][None, :]) ** 2
        grads[f"log_eta{l + 1}"] = S * (-0.5 * params.eta[l] * d2_l)
    for l in range(params.p):
        outer = np.outer(X[:, l], X[:, l])
        grads[f"u_xi{l + 1}"] = outer * (params.xi[l] + XI_FLOOR)
    return grads

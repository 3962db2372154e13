"""Model configuration, random effects and marginal covariance assembly.

A batch of I groups is observed, each holding J curves of length n over a
shared within-group design.  Conditional on positive random scales, curve j
of group i is

    y_ij = f_i + e_ij,   f_i | r_i0 ~ N(0, r_i0 * K_i),
                         e_ij | r_ij ~ N(0, phi_i * r_ij * I_n),

and each free scale r carries an inverse-gamma prior IG(nu, nu - 1), which
has unit mean and variance 1 / (nu - 2).  Integrating f_i out gives the
conditional marginal covariance of the stacked vector y_i in R^{nJ}

    C_ri = r_i0 * (A_J kron K_i) + phi_i * (diag(r_i1..r_iJ) kron I_n),

with A_J the all-ones J x J matrix.  Setting a scale identically to one
recovers a Gaussian process on that side; ``joint_error`` ties all scales
of a group to a single r_i, the classical heavy-tailed baseline where
signal and noise share one scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from .errors import InputError
from .kernel import KernelParams

PROCESS_GP = "gp"
PROCESS_ETP = "etp"

NU_MODE_FIXED = "fixed"
NU_MODE_ESTIMATED = "estimated"

# Smallest tail index accepted anywhere: the prior needs nu > 1 to be proper.
NU_FLOOR = 1.0 + 1e-6


@dataclass(frozen=True)
class ProcessSpec:
    """One side of the model: plain GP or heavy-tailed extension.

    kind : "gp" or "etp"
    nu   : tail index for "etp" (> 1); must be None for "gp".
    """

    kind: str
    nu: float | None = None

    def __post_init__(self):
        if self.kind not in (PROCESS_GP, PROCESS_ETP):
            raise InputError(f"unknown process kind {self.kind!r}")
        if self.kind == PROCESS_GP:
            if self.nu is not None:
                raise InputError("a GP process has no tail index")
        else:
            if self.nu is None or not np.isfinite(self.nu) or self.nu <= 1.0:
                raise InputError("an ETP process needs a finite tail index nu > 1")
            object.__setattr__(self, "nu", float(self.nu))

    @property
    def is_etp(self) -> bool:
        return self.kind == PROCESS_ETP


@dataclass(frozen=True)
class ModelConfig:
    """Which processes are heavy-tailed, and the current noise scales.

    Parameters
    ----------
    signal : ProcessSpec
        Law of the shared curve f_i (tail index nu0 when ETP).
    noise : ProcessSpec
        Law of the error processes e_ij (tail index nu1 when ETP).
    phis : tuple of float
        One positive noise variance per group; the length fixes I.
    nu_mode : "fixed" or "estimated"
        Whether tail indices are held at their values or profiled out.
    joint_error : bool
        Tie r_i0 = r_i1 = ... = r_iJ to a single scale per group with a
        single IG(nu0, nu0 - 1) prior.
    """

    signal: ProcessSpec
    noise: ProcessSpec
    phis: tuple[float, ...]
    nu_mode: str = NU_MODE_FIXED
    joint_error: bool = False

    def __post_init__(self):
        phis = tuple(float(p) for p in np.atleast_1d(np.asarray(self.phis, dtype=float)))
        object.__setattr__(self, "phis", phis)
        if len(phis) < 1 or any(not np.isfinite(p) or p <= 0 for p in phis):
            raise InputError("phis must be a non-empty tuple of positive reals")
        if self.nu_mode not in (NU_MODE_FIXED, NU_MODE_ESTIMATED):
            raise InputError(f"unknown nu_mode {self.nu_mode!r}")
        if self.joint_error and not self.signal.is_etp:
            raise InputError("joint_error requires an ETP signal process")
        if self.nu_mode == NU_MODE_ESTIMATED and not (self.signal.is_etp or self.noise.is_etp):
            raise InputError("nothing to estimate: no ETP process in the model")

    @property
    def I(self) -> int:
        return len(self.phis)

    @property
    def nu0(self) -> float | None:
        return self.signal.nu

    @property
    def nu1(self) -> float | None:
        return self.noise.nu

    def with_phis(self, phis) -> "ModelConfig":
        return replace(self, phis=tuple(float(p) for p in phis))


_MODEL_MENU = {
    # (signal kind, noise kind, joint_error)
    "gp-gp": (PROCESS_GP, PROCESS_GP, False),
    "gp-tp": (PROCESS_GP, PROCESS_ETP, False),
    "tp-gp": (PROCESS_ETP, PROCESS_GP, False),
    "tp-tp": (PROCESS_ETP, PROCESS_ETP, False),
    "etpr-joint": (PROCESS_ETP, PROCESS_ETP, True),
}

MODEL_NAMES = tuple(_MODEL_MENU)


def make_config(name: str, I: int, *, nu0: float = 1.05, nu1: float = 1.05,
                phis=None, nu_mode: str = NU_MODE_FIXED) -> ModelConfig:
    """Build a ModelConfig from a model-menu name.

    Names: "gp-gp" (plain GP regression), "gp-tp" (robust errors),
    "tp-gp", "tp-tp", and "etpr-joint" (one shared scale per group).
    ``phis`` defaults to ones; fitting re-initializes them from the data.
    """
    if name not in _MODEL_MENU:
        raise InputError(f"unknown model {name!r}; choose from {sorted(_MODEL_MENU)}")
    sig_kind, noi_kind, joint = _MODEL_MENU[name]
    signal = ProcessSpec(sig_kind, nu0 if sig_kind == PROCESS_ETP else None)
    if joint:
        # a single scale, a single tail index
        noise = ProcessSpec(PROCESS_ETP, nu0)
    else:
        noise = ProcessSpec(noi_kind, nu1 if noi_kind == PROCESS_ETP else None)
    if phis is None:
        phis = (1.0,) * I
    return ModelConfig(signal=signal, noise=noise, phis=tuple(phis),
                       nu_mode=nu_mode, joint_error=joint)


def model_name(config: ModelConfig) -> str:
    """Inverse of :func:`make_config` on the model menu."""
    if config.joint_error:
        return "etpr-joint"
    key = (config.signal.kind, config.noise.kind, False)
    for name, spec in _MODEL_MENU.items():
        if spec == key:
            return name
    raise InputError("configuration outside the model menu")


# ---------------------------------------------------------------------------
# data containers


@dataclass(frozen=True)
class GroupData:
    """Design and responses of one group: X is (n, p), Y is (J, n)."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[None, :]
        X = X.copy()
        Y = Y.copy()
        X.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        if X.ndim != 2 or Y.ndim != 2:
            raise InputError("X must be (n, p) and Y must be (J, n)")
        if Y.shape[1] != X.shape[0]:
            raise InputError("every curve must have one response per design row")
        if X.shape[0] < 1:
            raise InputError("need at least one design point per group")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise InputError("data contain non-finite values")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def J(self) -> int:
        return self.Y.shape[0]

    @property
    def y_stacked(self) -> np.ndarray:
        """Curves stacked into one vector of length n*J (curve 1 first)."""
        return self.Y.reshape(-1)


@dataclass(frozen=True)
class BatchData:
    """A batch of groups; group sizes may differ."""

    groups: tuple[GroupData, ...]

    def __post_init__(self):
        groups = tuple(self.groups)
        object.__setattr__(self, "groups", groups)
        if len(groups) < 1:
            raise InputError("need at least one group")
        p = groups[0].p
        if any(g.p != p for g in groups):
            raise InputError("all groups must share the covariate dimension")

    @property
    def I(self) -> int:
        return len(self.groups)

    @property
    def p(self) -> int:
        return self.groups[0].p

    def drop_curve(self, group: int, curve: int) -> "BatchData":
        """Return a copy without curve ``curve`` (0-based) of group ``group``."""
        if not (0 <= group < self.I):
            raise InputError(f"group index {group} out of range")
        g = self.groups[group]
        if not (0 <= curve < g.J):
            raise InputError(f"curve index {curve} out of range for group {group}")
        if g.J == 1:
            raise InputError("cannot drop the only curve of a group")
        Y = np.delete(g.Y, curve, axis=0)
        new = GroupData(X=g.X, Y=Y)
        return BatchData(groups=self.groups[:group] + (new,) + self.groups[group + 1:])


@dataclass(frozen=True)
class RandomEffects:
    """Positive scale vectors, one per group, each of length J_i + 1.

    Entry 0 is the signal scale r_i0; entries 1..J are the per-curve error
    scales.  Components tied to a GP side are held at one; under
    ``joint_error`` all entries of a group share a single value.
    """

    r: tuple[np.ndarray, ...]

    def __post_init__(self):
        rs = []
        for ri in self.r:
            ri = np.atleast_1d(np.asarray(ri, dtype=float)).copy()
            if ri.ndim != 1 or ri.size < 2:
                raise InputError("each group needs scales (r_i0, r_i1, ..., r_iJ)")
            if not (np.all(np.isfinite(ri)) and np.all(ri > 0)):
                raise InputError("random-effect scales must be positive and finite")
            ri.setflags(write=False)
            rs.append(ri)
        object.__setattr__(self, "r", tuple(rs))

    @staticmethod
    def ones(data: BatchData) -> "RandomEffects":
        return RandomEffects(r=tuple(np.ones(g.J + 1) for g in data.groups))

    def replace_group(self, i: int, ri) -> "RandomEffects":
        rs = list(self.r)
        rs[i] = np.asarray(ri, dtype=float)
        return RandomEffects(r=tuple(rs))


# ---------------------------------------------------------------------------
# inverse-gamma prior on the scales


def ig_log_density(nu: float, r) -> np.ndarray | float:
    """Log density of IG(nu, nu - 1) at r (elementwise over arrays).

    log g_nu(r) = nu*log(nu-1) - log Gamma(nu) - (nu+1)*log r - (nu-1)/r.

    The distribution has mean 1 for every nu > 1 and variance 1/(nu - 2)
    when nu > 2; small nu gives heavy tails.
    """
    if not np.isfinite(nu) or nu <= 1.0:
        raise InputError("tail index nu must be finite and > 1")
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr <= 0.0):
        raise InputError("the scale r must be positive")
    out = (nu * np.log(nu - 1.0) - gammaln(nu)
           - (nu + 1.0) * np.log(r_arr) - (nu - 1.0) / r_arr)
    return out if out.ndim else float(out)


def ig_score(nu: float, r) -> np.ndarray | float:
    """d/dr of log g_nu(r)."""
    r_arr = np.asarray(r, dtype=float)
    out = -(nu + 1.0) / r_arr + (nu - 1.0) / r_arr ** 2
    return out if out.ndim else float(out)


def ig_curvature(nu: float, r) -> np.ndarray | float:
    """d^2/dr^2 of log g_nu(r)."""
    r_arr = np.asarray(r, dtype=float)
    out = (nu + 1.0) / r_arr ** 2 - 2.0 * (nu - 1.0) / r_arr ** 3
    return out if out.ndim else float(out)


def sample_ig(nu: float, rng, size=None):
    """Draw from IG(nu, nu - 1) as the reciprocal of a Gamma variate.

    If X ~ Gamma(shape=nu, rate=nu-1) then 1/X ~ IG(nu, nu-1).  ``rng`` is
    a seed or a numpy Generator; passing the same seed reproduces the draw.
    """
    if not np.isfinite(nu) or nu <= 1.0:
        raise InputError("tail index nu must be finite and > 1")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    g = gen.gamma(shape=nu, scale=1.0 / (nu - 1.0), size=size)
    return 1.0 / g


# ---------------------------------------------------------------------------
# marginal covariance of a stacked group and its parameter derivatives


def build_covariance(config: ModelConfig, effects: RandomEffects,
                     K_in: np.ndarray, group: int) -> np.ndarray:
    """Marginal covariance C_ri of the stacked group vector y_i.

        C_ri = r_i0 * (A_J kron K) + phi_i * (diag(r_i1..r_iJ) kron I_n)

    ``K_in`` is the group's kernel Gram matrix; the curve count J is taken
    from the effects vector.
    """
    K = np.asarray(K_in, dtype=float)
    n = K.shape[0]
    ri = effects.r[group]
    J = ri.size - 1
    phi = config.phis[group]
    C = np.tile(ri[0] * K, (J, J))
    idx = np.arange(n)
    for j in range(J):
        C[j * n + idx, j * n + idx] += phi * ri[1 + j]
    return C


def covariance_partials(config: ModelConfig, effects: RandomEffects,
                        K_in: np.ndarray, gram_grads: dict[str, np.ndarray],
                        group: int) -> dict[str, np.ndarray]:
    """Derivatives of C_ri with respect to every free parameter.

    Keys follow the free-parameter naming used in estimation:

    - ``r0`` / ``r1``..``rJ``: free scales (``r`` alone under joint_error)
    - ``phi``: the group noise variance
    - kernel names from :func:`kernel.free_param_names` (internal scale)

    C_ri is linear in each scale, so the scale partials do not depend on r.
    """
    K = np.asarray(K_in, dtype=float)
    n = K.shape[0]
    ri = effects.r[group]
    J = ri.size - 1
    phi = config.phis[group]
    eye_big = np.eye(n * J)
    A_kron_K = np.tile(K, (J, J))

    out: dict[str, np.ndarray] = {}
    if config.joint_error:
        out["r"] = A_kron_K + phi * eye_big
    else:
        if config.signal.is_etp:
            out["r0"] = A_kron_K
        if config.noise.is_etp:
            for j in range(J):
                D = np.zeros((n * J, n * J))
                idx = np.arange(j * n, (j + 1) * n)
                D[idx, idx] = phi
                out[f"r{j + 1}"] = D

    if config.joint_error:
        out["phi"] = ri[0] * eye_big
    else:
        dphi = np.zeros((n * J, n * J))
        for j in range(J):
            idx = np.arange(j * n, (j + 1) * n)
            dphi[idx, idx] = ri[1 + j]
        out["phi"] = dphi

    for name, dK in gram_grads.items():
        out[name] = ri[0] * np.tile(dK, (J, J))
    return out


def free_r_labels(config: ModelConfig, J: int) -> list[str]:
    """Names of the free scales of one group, in packing order."""
    if config.joint_error:
        return ["r"]
    labels = []
    if config.signal.is_etp:
        labels.append("r0")
    if config.noise.is_etp:
        labels += [f"r{j + 1}" for j in range(J)]
    return labels


def expand_free_r(config: ModelConfig, J: int, values: np.ndarray) -> np.ndarray:
    """Map a group's free-scale values onto the full (J+1) vector."""
    full = np.ones(J + 1)
    if config.joint_error:
        full[:] = values[0]
        return full
    k = 0
    if config.signal.is_etp:
        full[0] = values[k]
        k += 1
    if config.noise.is_etp:
        full[1:] = values[k:k + J]
        k += J
    return full


def extract_free_r(config: ModelConfig, ri: np.ndarray) -> np.ndarray:
    """Inverse of :func:`expand_free_r` for one group."""
    J = ri.size - 1
    if config.joint_error:
        return np.array([ri[0]])
    parts = []
    if config.signal.is_etp:
        parts.append(ri[:1])
    if config.noise.is_etp:
        parts.append(ri[1:])
    if not parts:
        return np.empty(0)
    return np.concatenate(parts)

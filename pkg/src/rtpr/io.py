"""File formats: datasets, run configurations, fit artifacts, reports.

Datasets are long-format CSV with columns ``group,curve,x1..xp,y`` (the
covariate column may be named plain ``x`` when p = 1).  Group ids must be
1..I and curve ids 1..J_i, every curve of a group must observe the same
design, and floats are written with ``repr`` so a load/serialize/load
cycle reproduces the in-memory arrays bit for bit.

Run configurations are ``key = value`` text with ``#`` comments; unknown
keys are rejected rather than ignored.  A fitted model is stored as one
self-describing JSON artifact (schema ``rtpr-fit/1``) embedding the
exact data it was fit to, so downstream commands need nothing else.  All
output writers echo the originating configuration as ``# key = value``
comment lines and never write timestamps, keeping repeated runs
byte-identical.
"""

from __future__ import annotations

import csv
import io as _io
import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import InputError
from .estimate import Beta, Diagnostics, FitResult, laplace_B, _corrected_cov_group
from .kernel import KernelParams
from .model import (
    BatchData,
    GroupData,
    ModelConfig,
    RandomEffects,
    make_config,
    model_name,
)
from .predict import OutlierReport, Prediction
from .simulate import (
    DISTURB_CONSTANT,
    DISTURB_NONE,
    DISTURB_RANDOM_T2,
    ERROR_ETP,
    ERROR_GAUSSIAN,
    SimConfig,
)

ARTIFACT_SCHEMA = "rtpr-fit/1"

_Z95 = 1.959963984540054


def _fmt(x) -> str:
    """Shortest float text that round-trips exactly."""
    return repr(float(x))


# ---------------------------------------------------------------------------
# datasets


def load_dataset(path: str) -> BatchData:
    """Read a long-format dataset CSV into a BatchData.

    Validates contiguous 1-based group and curve ids and a shared design
    per group.  When a curve lists the same covariate rows in a different
    order it is re-aligned to the group's first curve, which is only
    possible while covariate rows are unique; ambiguous duplicates are an
    error.
    """
    try:
        fh = open(path, "r", newline="")
    except OSError as exc:
        raise InputError(f"cannot read dataset {path!r}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"dataset {path!r} is empty") from None
        header = [h.strip() for h in header]
        if len(header) < 4 or header[0] != "group" or header[1] != "curve" or header[-1] != "y":
            raise InputError(
                "dataset header must be group,curve,<covariates...>,y")
        xcols = header[2:-1]
        p = len(xcols)
        if p == 1 and xcols[0] not in ("x", "x1"):
            raise InputError("the covariate column must be named x or x1")
        if p > 1 and xcols != [f"x{l + 1}" for l in range(p)]:
            raise InputError("covariate columns must be named x1..xp in order")

        rows: dict[int, dict[int, list]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3 + p:
                raise InputError(f"line {lineno}: expected {3 + p} fields")
            try:
                gid = int(row[0])
                cid = int(row[1])
                xs = tuple(float(v) for v in row[2:2 + p])
                y = float(row[2 + p])
            except ValueError as exc:
                raise InputError(f"line {lineno}: {exc}") from exc
            rows.setdefault(gid, {}).setdefault(cid, []).append((xs, y))

    if not rows:
        raise InputError(f"dataset {path!r} has no data rows")
    gids = sorted(rows)
    if gids != list(range(1, len(gids) + 1)):
        raise InputError("group ids must be contiguous starting at 1")

    groups = []
    for gid in gids:
        curves = rows[gid]
        cids = sorted(curves)
        if cids != list(range(1, len(cids) + 1)):
            raise InputError(f"group {gid}: curve ids must be contiguous starting at 1")
        first = curves[cids[0]]
        design = [xs for xs, _ in first]
        n = len(design)
        has_dups = len(set(design)) != n
        Y = np.empty((len(cids), n))
        for jj, cid in enumerate(cids):
            entries = curves[cid]
            if len(entries) != n:
                raise InputError(
                    f"group {gid} curve {cid}: {len(entries)} rows, expected {n}")
            seq = [xs for xs, _ in entries]
            if seq == design:
                Y[jj] = [y for _, y in entries]
            elif sorted(seq) != sorted(design):
                raise InputError(
                    f"group {gid} curve {cid}: covariates differ from the group design")
            elif has_dups:
                raise InputError(
                    f"group {gid} curve {cid}: rows are ordered differently and "
                    "duplicate covariates make re-alignment ambiguous")
            else:
                lookup = {xs: y for xs, y in entries}
                Y[jj] = [lookup[xs] for xs in design]
        X = np.array(design, dtype=float)
        groups.append(GroupData(X=X, Y=Y))
    return BatchData(groups=tuple(groups))


def save_dataset(data: BatchData, path: str) -> None:
    """Write a BatchData as dataset CSV (inverse of :func:`load_dataset`)."""
    p = data.p
    xcols = ["x"] if p == 1 else [f"x{l + 1}" for l in range(p)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "curve"] + xcols + ["y"])
        for gi, g in enumerate(data.groups, start=1):
            for ci in range(1, g.J + 1):
                for k in range(g.n):
                    w.writerow([gi, ci]
                               + [_fmt(v) for v in g.X[k]]
                               + [_fmt(g.Y[ci - 1, k])])


# ---------------------------------------------------------------------------
# run configurations


@dataclass(frozen=True)
class RunConfig:
    """Parsed fit configuration with defaults filled in.

    The four ``*_init`` keys override the data-driven starting values of
    the optimizer; they must be given together (eta/xi as comma lists) and
    are applied to every group.
    """

    model: str
    nu0: float = 1.05
    nu1: float = 1.05
    nu_mode: str = "fixed"
    seed: int = 0
    inner_tol: float = 1e-8
    outer_tol: float = 1e-5
    max_inner: int = 200
    max_outer: int = 500
    multi_start: int = 0
    theta0_init: float | None = None
    eta_init: str | None = None
    xi_init: str | None = None
    phi_init: float | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def init_beta(self, data: BatchData) -> Beta | None:
        """Materialize the configured starting point, if any."""
        given = [self.theta0_init, self.eta_init, self.xi_init, self.phi_init]
        if all(v is None for v in given):
            return None
        if any(v is None for v in given):
            raise InputError(
                "theta0_init, eta_init, xi_init and phi_init must be given together")
        try:
            eta = np.array([float(t) for t in self.eta_init.split(",")])
            xi = np.array([float(t) for t in self.xi_init.split(",")])
        except ValueError as exc:
            raise InputError(f"bad eta_init/xi_init value: {exc}") from exc
        if eta.size != data.p or xi.size != data.p:
            raise InputError(
                f"eta_init and xi_init need one value per covariate (p={data.p})")
        theta = KernelParams(theta0=self.theta0_init, eta=eta, xi=xi)
        return Beta(thetas=(theta,) * data.I, phis=(self.phi_init,) * data.I,
                    nu0=self.nu0, nu1=self.nu1)


def _read_kv(path: str) -> dict[str, str]:
    try:
        fh = open(path, "r")
    except OSError as exc:
        raise InputError(f"cannot read config {path!r}: {exc}") from exc
    out: dict[str, str] = {}
    with fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise InputError(f"{path}:{lineno}: expected key = value")
            key, val = text.split("=", 1)
            key = key.strip()
            val = val.strip()
            if not key or not val:
                raise InputError(f"{path}:{lineno}: empty key or value")
            if key in out:
                raise InputError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = val
    return out


def _convert(path: str, key: str, val: str, kind):
    try:
        if kind is bool:
            low = val.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(f"not a boolean: {val!r}")
        return kind(val)
    except ValueError as exc:
        raise InputError(f"{path}: bad value for {key}: {exc}") from exc


_FIT_KEYS = {
    "model": str, "nu0": float, "nu1": float, "nu_mode": str, "seed": int,
    "inner_tol": float, "outer_tol": float, "max_inner": int,
    "max_outer": int, "multi_start": int,
    "theta0_init": float, "eta_init": str, "xi_init": str, "phi_init": float,
}


def parse_run_config(path: str) -> RunConfig:
    """Parse a fit configuration file, rejecting unknown keys."""
    kv = _read_kv(path)
    unknown = set(kv) - set(_FIT_KEYS)
    if unknown:
        raise InputError(f"{path}: unknown keys {sorted(unknown)}")
    if "model" not in kv:
        raise InputError(f"{path}: the 'model' key is required")
    fields = {k: _convert(path, k, v, _FIT_KEYS[k]) for k, v in kv.items()}
    cfg = RunConfig(**fields)
    if cfg.nu_mode not in ("fixed", "estimated"):
        raise InputError(f"{path}: nu_mode must be fixed or estimated")
    return cfg


@dataclass(frozen=True)
class SimSpec:
    """Parsed simulation configuration: a template plus scenario rows."""

    base: SimConfig
    models: tuple[str, ...]
    scenarios: tuple[tuple, ...]  # (error_kind, error_nu, disturbance, gamma)
    nu0: float = 1.05
    nu1: float = 1.05
    dump_data: bool = False
    raw: dict | None = None


_SIM_KEYS = {
    "I": int, "J": int, "n_train": int, "grid_size": int,
    "grid_min": float, "grid_max": float,
    "theta0_true": float, "eta_true": str, "xi_true": str, "phi_true": float,
    "disturbed_curve": int, "reps": int, "seed": int,
    "models": str, "scenarios": str, "nu0": float, "nu1": float,
    "dump_data": bool,
}


def _parse_scenario(path: str, token: str):
    parts = token.split(":")
    if len(parts) != 3:
        raise InputError(f"{path}: scenario {token!r} is not error:disturbance:gamma")
    err, dist, gam = (s.strip() for s in parts)
    if err == "gaussian":
        kind, nu = ERROR_GAUSSIAN, None
    elif err.startswith("etp"):
        kind = ERROR_ETP
        try:
            nu = float(err[3:])
        except ValueError as exc:
            raise InputError(f"{path}: bad error tail index in {token!r}") from exc
    else:
        raise InputError(f"{path}: unknown error kind in {token!r}")
    dmap = {"none": DISTURB_NONE, "constant": DISTURB_CONSTANT,
            "random": DISTURB_RANDOM_T2}
    if dist not in dmap:
        raise InputError(f"{path}: unknown disturbance in {token!r}")
    gamma = _convert(path, "gamma", gam, float)
    return (kind, nu, dmap[dist], gamma)


def parse_sim_config(path: str) -> SimSpec:
    """Parse a simulation configuration file, rejecting unknown keys."""
    kv = _read_kv(path)
    unknown = set(kv) - set(_SIM_KEYS)
    if unknown:
        raise InputError(f"{path}: unknown keys {sorted(unknown)}")
    for req in ("models", "scenarios"):
        if req not in kv:
            raise InputError(f"{path}: the {req!r} key is required")
    vals = {k: _convert(path, k, v, _SIM_KEYS[k]) for k, v in kv.items()}

    def grab(key, default):
        return vals.get(key, default)

    def floats(key, default):
        if key not in vals:
            return default
        return np.array([float(t) for t in str(vals[key]).split(",")])

    kernel_truth = KernelParams(
        theta0=grab("theta0_true", 0.1),
        eta=floats("eta_true", np.array([10.0])),
        xi=floats("xi_true", np.array([0.1])),
    )
    base = SimConfig(
        I=grab("I", 1), J=grab("J", 6), n_train=grab("n_train", 10),
        grid_size=grab("grid_size", 30),
        grid_range=(grab("grid_min", 0.0), grab("grid_max", 3.0)),
        kernel_truth=kernel_truth, phi_truth=grab("phi_true", 0.2),
        disturbed_curve=grab("disturbed_curve", 6),
        reps=grab("reps", 100), seed=grab("seed", 0),
    )
    models = tuple(t.strip() for t in str(vals["models"]).split(",") if t.strip())
    if not models:
        raise InputError(f"{path}: empty model list")
    scenarios = tuple(_parse_scenario(path, t.strip())
                      for t in str(vals["scenarios"]).split(",") if t.strip())
    if not scenarios:
        raise InputError(f"{path}: empty scenario list")
    return SimSpec(base=base, models=models, scenarios=scenarios,
                   nu0=grab("nu0", 1.05), nu1=grab("nu1", 1.05),
                   dump_data=grab("dump_data", False), raw=vals)


def scenario_config(spec: SimSpec, row: int, seed: int) -> SimConfig:
    """Materialize scenario ``row`` of a SimSpec with its derived seed."""
    kind, nu, dist, gamma = spec.scenarios[row]
    return replace(spec.base, error_kind=kind, error_nu=nu,
                   disturbance=dist, gamma=gamma, seed=seed)


# ---------------------------------------------------------------------------
# fit artifacts


def write_fit_artifact(fit: FitResult, path: str, run_config: dict | None = None) -> None:
    """Serialize a fit (with its data) as a self-describing JSON artifact."""
    cfg = fit.config
    beta = fit.beta_hat
    doc = {
        "schema": ARTIFACT_SCHEMA,
        "model": {
            "name": model_name(cfg),
            "nu_mode": cfg.nu_mode,
            "nu0": beta.nu0,
            "nu1": beta.nu1,
        },
        "beta": {
            "groups": [
                {"theta0": th.theta0, "eta": th.eta.tolist(),
                 "xi": th.xi.tolist(), "phi": beta.phis[i]}
                for i, th in enumerate(beta.thetas)
            ],
        },
        "r_hat": [ri.tolist() for ri in fit.r_hat.r],
        "f_hat": [fi.tolist() for fi in fit.f_hat],
        "m_value": fit.m_value,
        "diagnostics": asdict(fit.diagnostics),
        "run_config": run_config or {},
        "data": {
            "groups": [
                {"X": g.X.tolist(), "Y": g.Y.tolist()} for g in fit.data.groups
            ],
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_fit_artifact(path: str) -> tuple[FitResult, dict]:
    """Reconstruct a FitResult from an artifact.

    The curvature blocks are recomputed from the stored parameters (they
    are deterministic functions of them).  Returns the fit and the echoed
    run configuration.
    """
    try:
        with open(path, "r") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read fit artifact {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"fit artifact {path!r} is not valid JSON: {exc}") from exc
    if doc.get("schema") != ARTIFACT_SCHEMA:
        raise InputError(
            f"unsupported artifact schema {doc.get('schema')!r}, "
            f"expected {ARTIFACT_SCHEMA!r}")
    try:
        groups = tuple(
            GroupData(X=np.array(g["X"], dtype=float), Y=np.array(g["Y"], dtype=float))
            for g in doc["data"]["groups"])
        data = BatchData(groups=groups)
        model = doc["model"]
        betadoc = doc["beta"]["groups"]
        thetas = tuple(
            KernelParams(theta0=g["theta0"], eta=np.array(g["eta"]),
                         xi=np.array(g["xi"])) for g in betadoc)
        phis = tuple(g["phi"] for g in betadoc)
        config = make_config(model["name"], data.I, nu0=model["nu0"] or 1.05,
                             nu1=model["nu1"] or 1.05, phis=phis,
                             nu_mode=model["nu_mode"])
        beta = Beta(thetas=thetas, phis=phis, nu0=model["nu0"], nu1=model["nu1"])
        r_hat = RandomEffects(r=tuple(np.array(ri, dtype=float) for ri in doc["r_hat"]))
        f_hat = tuple(np.array(fi, dtype=float) for fi in doc["f_hat"])
        m_value = float(doc["m_value"])
        diag_fields = doc.get("diagnostics", {})
        diagnostics = Diagnostics(**{
            k: v for k, v in diag_fields.items()
            if k in Diagnostics.__dataclass_fields__})
        run_config = doc.get("run_config", {})
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"fit artifact {path!r} is malformed: {exc}") from exc
    B = laplace_B(config, beta, r_hat, data)
    H_in = tuple(
        _corrected_cov_group(config, beta, r_hat, f_hat[i], data, i)
        for i in range(data.I))
    fit = FitResult(config=config, data=data, beta_hat=beta, r_hat=r_hat,
                    f_hat=f_hat, B=B, H_in=H_in, m_value=m_value,
                    diagnostics=diagnostics)
    return fit, run_config


# ---------------------------------------------------------------------------
# report writers


def _echo_lines(echo: dict) -> str:
    buf = _io.StringIO()
    for key in sorted(echo):
        buf.write(f"# {key} = {echo[key]}\n")
    return buf.getvalue()


def write_predictions(preds: list[Prediction], path: str, echo: dict | None = None) -> None:
    """Prediction table: one row per (group, query point), with a 95% band."""
    if not preds:
        raise InputError("no predictions to write")
    p = preds[0].at.shape[1]
    xcols = ["x"] if p == 1 else [f"x{l + 1}" for l in range(p)]
    with open(path, "w", newline="") as fh:
        if echo:
            fh.write(_echo_lines(echo))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group"] + xcols + ["mean", "sd", "lower95", "upper95"])
        for gi, pr in enumerate(preds, start=1):
            sd = pr.sd
            for t in range(pr.mean.size):
                w.writerow([gi] + [_fmt(v) for v in pr.at[t]]
                           + [_fmt(pr.mean[t]), _fmt(sd[t]),
                              _fmt(pr.mean[t] - _Z95 * sd[t]),
                              _fmt(pr.mean[t] + _Z95 * sd[t])])


def write_outlier_report(report: OutlierReport, path: str, echo: dict | None = None) -> None:
    """Outlier table: fitted error scale and flag per curve."""
    with open(path, "w", newline="") as fh:
        if echo:
            fh.write(_echo_lines(echo))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "curve", "rhat", "group_median", "threshold", "flag"])
        for gi, (scales, flags) in enumerate(zip(report.rhat, report.flags), start=1):
            med = report.medians[gi - 1]
            for ci in range(scales.size):
                w.writerow([gi, ci + 1, _fmt(scales[ci]), _fmt(med),
                            _fmt(report.rule.c_mult * med), int(flags[ci])])


def write_sim_results(spec: SimSpec, results: list, path: str,
                      echo: dict | None = None) -> None:
    """Scenario-by-model tables of simulation results.

    ``results`` holds one SimResult per scenario row.  The main table has
    one row per scenario and one column per model with "mean(sd)" MSE
    cells; the exact per-replication values go to ``<path>.reps.csv``.
    When any model carries per-curve error scales a companion
    ``<path>.rhat.csv`` table with their means, spreads and flag
    frequencies is written as well.
    """
    if not results:
        raise InputError("no simulation results to write")
    names = results[0].model_names
    with open(path, "w", newline="") as fh:
        if echo:
            fh.write(_echo_lines(echo))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "error", "disturbance", "gamma"] + list(names))
        for row, res in enumerate(results):
            kind, nu, dist, gamma = spec.scenarios[row]
            err = kind if nu is None else f"{kind}{nu:g}"
            cells = [f"{res.mse_mean[name]:.3f}({res.mse_sd[name]:.3f})"
                     for name in res.model_names]
            w.writerow([row + 1, err, dist, _fmt(gamma)] + cells)

    with open(path + ".reps.csv", "w", newline="") as fh:
        if echo:
            fh.write(_echo_lines(echo))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "rep", "model", "mse"])
        for row, res in enumerate(results):
            for name in res.model_names:
                vals = res.mse[name]
                for k in range(vals.size):
                    w.writerow([row + 1, k + 1, name, _fmt(vals[k])])

    any_rhat = any(res.rhat_mean for res in results)
    if any_rhat:
        with open(path + ".rhat.csv", "w", newline="") as fh:
            if echo:
                fh.write(_echo_lines(echo))
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "model", "group", "curve",
                        "rhat_mean", "rhat_sd", "flag_freq"])
            for row, res in enumerate(results):
                for name in res.model_names:
                    if name not in res.rhat_mean:
                        continue
                    rm = res.rhat_mean[name]
                    rs = res.rhat_sd[name]
                    ff = res.flag_freq[name]
                    for i in range(rm.shape[0]):
                        for j in range(rm.shape[1]):
                            w.writerow([row + 1, name, i + 1, j + 1,
                                        _fmt(rm[i, j]), _fmt(rs[i, j]),
                                        _fmt(ff[i, j])])


def write_truth(S: np.ndarray, truths: list, path: str, echo: dict | None = None) -> None:
    """True curves on the full grid, one row per (group, grid point)."""
    with open(path, "w", newline="") as fh:
        if echo:
            fh.write(_echo_lines(echo))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "x", "f_true"])
        for gi, f0 in enumerate(truths, start=1):
            for k in range(S.size):
                w.writerow([gi, _fmt(S[k]), _fmt(f0[k])])


def parse_grid_spec(spec: str) -> np.ndarray:
    """Parse "lo:hi:count" into an inclusive linspace."""
    parts = spec.split(":")
    if len(parts) != 3:
        raise InputError(f"grid spec {spec!r} is not lo:hi:count")
    try:
        lo = float(parts[0])
        hi = float(parts[1])
        count = int(parts[2])
    except ValueError as exc:
        raise InputError(f"grid spec {spec!r}: {exc}") from exc
    if count < 1 or not hi > lo:
        raise InputError(f"grid spec {spec!r}: need hi > lo and count >= 1")
    return np.linspace(lo, hi, count)


def load_query(path: str) -> np.ndarray:
    """Read query points from a CSV with columns x (or x1..xp)."""
    try:
        fh = open(path, "r", newline="")
    except OSError as exc:
        raise InputError(f"cannot read query file {path!r}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"query file {path!r} is empty") from None
        p = len(header)
        if p == 1 and header[0] not in ("x", "x1"):
            raise InputError("query header must be x or x1..xp")
        if p > 1 and header != [f"x{l + 1}" for l in range(p)]:
            raise InputError("query header must be x or x1..xp")
        pts = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != p:
                raise InputError(f"query line {lineno}: expected {p} fields")
            try:
                pts.append([float(v) for v in row])
            except ValueError as exc:
                raise InputError(f"query line {lineno}: {exc}") from exc
    if not pts:
        raise InputError(f"query file {path!r} has no points")
    return np.array(pts, dtype=float)

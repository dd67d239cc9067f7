"""Benchmark protocol: noise corruption, multi-trial sweeps and summary metrics.

A sweep runs every estimator on identical data and initial guesses for
each (system, M, T, noise ratio, trial) combination.  Each trial draws its
randomness from its own counter-based stream, so results do not depend on
execution order or on the number of worker processes.

Failure criterion and summary statistics::

    failed      coef_err >= 25 or fwd_err >= 25 or simulation NaN
    coef_err    ||p_hat - p*|| / ||p*||
    fwd_err     ||U(p_hat, u0*) - U*||_F / ||U*||_F
    bias_j      med_n (p_hat_j - p*_j)^2 / p*_j^2
    var_j       med_n (p_hat_j - pbar_j)^2 / p*_j^2
    mse_j       med_n [(p_hat_j - p*_j)^2 + (p_hat_j - pbar_j)^2] / p*_j^2
    coverage_j  share of successful trials with |p_hat_j - p*_j| < 2 sqrt(C_jj)

with medians and means taken over successful trials only.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import platform
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .integrate import simulate, uniform_grid
from .model import builtin
from .solvers import METHODS, EstimationResult, estimate, hybrid, wendy_mle
from .weakform import NumericalFailure, build_problem

FAIL_THRESHOLD = 25.0
CONVENTIONS = ("linear", "squared")

RESULT_COLUMNS = (
    "system", "M", "T", "noise_ratio", "trial", "method", "coef_err", "fwd_err", "failed",
    "success", "termination", "iterations", "nll", "fell_back", "p_hat", "stderr", "p0",
)


class ConfigError(ValueError):
    """Invalid benchmark configuration."""


# ---------------------------------------------------------------------------
# noise


def noise_variance(truth, noise_ratio: float, convention: str = "linear") -> float:
    """Per-entry variance of additive noise: ``c * ||U||_F^2 / (M + 1)``.

    ``c`` is the noise ratio (``"linear"``) or its square (``"squared"``).
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"noise variance convention must be one of {CONVENTIONS}, got {convention!r}")
    truth = np.asarray(truth, dtype=float)
    c = noise_ratio if convention == "linear" else noise_ratio**2
    return float(c * np.sum(truth**2) / truth.shape[0])


def log_noise_variance(noise_ratio: float, convention: str = "linear") -> float:
    if convention not in CONVENTIONS:
        raise ValueError(f"noise variance convention must be one of {CONVENTIONS}, got {convention!r}")
    return float(noise_ratio if convention == "linear" else noise_ratio**2)


def corrupt(truth, kind: str, noise_ratio: float, rng: np.random.Generator,
            convention: str = "linear") -> np.ndarray:
    """Add Gaussian noise (``kind="additive"``) or apply log-normal noise (``"lognormal"``)."""
    truth = np.asarray(truth, dtype=float)
    if noise_ratio < 0:
        raise ValueError(f"noise ratio must be nonnegative, got {noise_ratio}")
    if kind == "additive":
        s = np.sqrt(noise_variance(truth, noise_ratio, convention))
        return truth + s * rng.standard_normal(truth.shape)
    if kind == "lognormal":
        # exact zeros are tolerated only in the first and last rows (e.g. an initial condition)
        if np.any(truth < 0) or np.any(truth[1:-1] == 0):
            raise ValueError("log-normal noise needs positive data")
        s = np.sqrt(log_noise_variance(noise_ratio, convention))
        return truth * np.exp(s * rng.standard_normal(truth.shape))
    raise ValueError(f"noise kind must be 'additive' or 'lognormal', got {kind!r}")


# ---------------------------------------------------------------------------
# per-trial randomness


def trial_rng(master_seed: int, system: str, M: int, T: float, noise_ratio: float,
              trial: int) -> np.random.Generator:
    """Independent Philox stream keyed by the trial coordinates."""
    key = [
        int(master_seed) & 0xFFFFFFFF,
        zlib.crc32(system.encode()),
        int(M),
        zlib.crc32(repr(float(T)).encode()),
        zlib.crc32(repr(float(noise_ratio)).encode()),
        int(trial),
    ]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SweepConfig:
    """Benchmark grid.  ``T`` entries of None mean the system's default horizon.

    If ``dt`` is set, ``M`` is derived per horizon as ``round(T / dt)`` and
    the ``M`` list is ignored.
    """

    systems: list
    M: list = field(default_factory=lambda: [256])
    noise_ratios: list = field(default_factory=lambda: [0.05])
    trials: int = 10
    seed: int = 0
    methods: list = field(default_factory=lambda: list(METHODS))
    T: list = field(default_factory=lambda: [None])
    dt: Optional[float] = None
    noise_variance_convention: str = "linear"
    time_limit: float = 200.0
    use_bounds: Optional[bool] = None

    def validate(self):
        if not self.systems:
            raise ConfigError("config needs at least one system")
        for s in self.systems:
            try:
                builtin(s)
            except KeyError as e:
                raise ConfigError(str(e.args[0])) from None
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if self.noise_variance_convention not in CONVENTIONS:
            raise ConfigError(f"noise_variance_convention must be one of {list(CONVENTIONS)}")
        if int(self.trials) < 1:
            raise ConfigError("trials must be at least 1")
        if any(not (isinstance(m, int) and m >= 8) for m in self.M) and self.dt is None:
            raise ConfigError(f"M entries must be integers >= 8, got {self.M}")
        if any(r < 0 for r in self.noise_ratios):
            raise ConfigError("noise ratios must be nonnegative")
        if self.dt is not None and not self.dt > 0:
            raise ConfigError("dt must be positive")
        if any(t is not None and not t > 0 for t in self.T):
            raise ConfigError("T entries must be positive")
        return self


def load_config(path: str) -> SweepConfig:
    """Read a sweep configuration from a ``.toml`` or ``.json`` file."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path!r}: {e}") from None
    try:
        if path.endswith(".toml"):
            try:
                import tomllib
            except ModuleNotFoundError:  # pragma: no cover
                import tomli as tomllib
            data = tomllib.loads(raw.decode())
        elif path.endswith(".json"):
            data = json.loads(raw)
        else:
            raise ConfigError("config file must end in .toml or .json")
    except (ValueError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot parse config {path!r}: {e}") from None
    return config_from_dict(data)


def config_from_dict(data: dict) -> SweepConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a table/object")
    known = set(SweepConfig.__dataclass_fields__)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; allowed: {sorted(known)}")
    d = dict(data)
    for key in ("systems", "M", "noise_ratios", "methods", "T"):
        if key in d and not isinstance(d[key], list):
            d[key] = [d[key]]
    if "systems" not in d:
        raise ConfigError("config needs 'systems'")
    try:
        cfg = SweepConfig(**d)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    cfg.noise_ratios = [float(r) for r in cfg.noise_ratios]
    cfg.T = [None if t is None else float(t) for t in cfg.T]
    return cfg.validate()


# ---------------------------------------------------------------------------
# trials


@dataclass(frozen=True)
class TrialSpec:
    system: str
    M: int
    T: float
    noise_ratio: float
    trial: int
    seed: int
    methods: tuple
    convention: str = "linear"
    time_limit: float = 200.0
    use_bounds: Optional[bool] = None

    @property
    def key(self):
        return (self.system, self.M, self.T, self.noise_ratio, self.trial)


def expand(cfg: SweepConfig) -> list:
    """All trials of a sweep in canonical order."""
    specs = []
    for system in cfg.systems:
        name = builtin(system).name
        for T in cfg.T:
            T_eff = builtin(system, T).T
            Ms = [int(round(T_eff / cfg.dt))] if cfg.dt is not None else [int(m) for m in cfg.M]
            for M in Ms:
                for nr in cfg.noise_ratios:
                    for trial in range(int(cfg.trials)):
                        specs.append(TrialSpec(name, M, float(T_eff), float(nr), trial, int(cfg.seed),
                                               tuple(cfg.methods), cfg.noise_variance_convention,
                                               float(cfg.time_limit), cfg.use_bounds))
    return specs


@lru_cache(maxsize=32)
def truth_data(system: str, M: int, T: float):
    """Noise-free trajectory of a built-in system on the uniform grid (cached per process)."""
    s = builtin(system, T)
    grid = uniform_grid(s.T, M)
    tr = simulate(s.model, s.p_true, s.u0, grid)
    if not tr.ok:
        raise NumericalFailure(f"reference simulation of {system} failed: {tr.message}")
    return grid, tr.U


def coefficient_error(p_hat, p_true) -> float:
    p_hat = np.asarray(p_hat, dtype=float)
    p_true = np.asarray(p_true, dtype=float)
    return float(np.linalg.norm(p_hat - p_true) / np.linalg.norm(p_true))


def forward_error(system, p_hat, grid, truth) -> float:
    """Relative Frobenius error of the trajectory from ``p_hat`` and the true initial condition; NaN on blow-up."""
    if not np.all(np.isfinite(p_hat)):
        return float("nan")
    with np.errstate(all="ignore"):
        tr = simulate(system.model, p_hat, system.u0, grid)
    if not tr.ok or not np.all(np.isfinite(tr.U)):
        return float("nan")
    return float(np.linalg.norm(tr.U - truth) / np.linalg.norm(truth))


def is_failed(coef_err: float, fwd_err: float) -> bool:
    return not (np.isfinite(coef_err) and np.isfinite(fwd_err)
                and coef_err < FAIL_THRESHOLD and fwd_err < FAIL_THRESHOLD)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % float(x)
    if isinstance(x, np.ndarray) or isinstance(x, (list, tuple)):
        return ";".join("%.17g" % float(v) for v in np.ravel(x))
    return str(x)


def run_trial(spec: TrialSpec) -> list:
    """Run every requested estimator on one noisy data set; one dict per estimator."""
    s = builtin(spec.system, spec.T)
    grid, truth = truth_data(spec.system, spec.M, spec.T)
    rng = trial_rng(spec.seed, spec.system, spec.M, spec.T, spec.noise_ratio, spec.trial)
    U = corrupt(truth, s.noise, spec.noise_ratio, rng, spec.convention)
    p0 = rng.uniform(s.init_box[:, 0], s.init_box[:, 1])
    use_bounds = s.use_bounds if spec.use_bounds is None else spec.use_bounds
    bounds = (s.bounds if s.bounds is not None else s.init_box) if use_bounds else None
    # exact zero noise is passed on so the estimators take their noiseless path
    sigma2 = 0.0 if spec.noise_ratio == 0 else None

    problem = None
    problem_error = ""
    weak = [m for m in spec.methods if m != "oels"]
    if weak:
        try:
            problem = build_problem(s.model, U, grid, noise=s.noise, sigma2=sigma2)
        except (NumericalFailure, ValueError, np.linalg.LinAlgError) as e:
            problem_error = f"weak problem setup failed: {e}"

    results = {}
    for method in spec.methods:
        if method != "oels" and problem is None:
            results[method] = EstimationResult(method, p0.copy(), False, "numerical_failure", message=problem_error)
            continue
        try:
            if method == "hybrid":
                mle = results.get("mle")
                if mle is None:
                    mle = wendy_mle(problem, p0, bounds, time_limit=spec.time_limit)
                res = hybrid(problem, U, p0, bounds, time_limit=spec.time_limit, mle_result=mle)
            elif method == "oels":
                res = estimate("oels", s.model, U, grid, p0, time_limit=spec.time_limit)
            else:
                res = estimate(method, s.model, U, grid, p0, noise=s.noise, bounds=bounds,
                               time_limit=spec.time_limit, problem=problem)
        except (NumericalFailure, np.linalg.LinAlgError, FloatingPointError) as e:
            res = EstimationResult(method, p0.copy(), False, "numerical_failure", message=str(e))
        results[method] = res

    rows = []
    for method in spec.methods:
        res = results[method]
        ce = coefficient_error(res.p_hat, s.p_true)
        fe = forward_error(s, res.p_hat, grid, truth)
        rows.append({
            "system": spec.system, "M": spec.M, "T": spec.T, "noise_ratio": spec.noise_ratio,
            "trial": spec.trial, "method": method, "coef_err": ce, "fwd_err": fe,
            "failed": is_failed(ce, fe), "success": bool(res.success), "termination": res.termination,
            "iterations": int(res.iterations), "nll": float(res.nll), "fell_back": bool(res.fell_back),
            "p_hat": np.asarray(res.p_hat, dtype=float), "stderr": res.stderr, "p0": p0,
        })
    return rows


# ---------------------------------------------------------------------------
# metrics


def _median(x):
    x = np.asarray(x, dtype=float)
    return float(np.median(x)) if x.size else float("nan")


def compute_metrics(p_hats, p_true, coef_errs, fwd_errs, stderrs=None) -> dict:
    """Summary statistics over N trials of one estimator.

    ``p_hats`` is (N, J); ``stderrs`` (N, J) may contain NaN rows for
    estimators without a covariance.  Trials with NaN forward error count
    as failed.
    """
    P = np.asarray(p_hats, dtype=float)
    p_true = np.asarray(p_true, dtype=float)
    ce = np.asarray(coef_errs, dtype=float)
    fe = np.asarray(fwd_errs, dtype=float)
    N, J = P.shape
    ok = np.array([not is_failed(a, b) for a, b in zip(ce, fe)], dtype=bool)
    n_ok = int(ok.sum())
    out = {"N": N, "n_success": n_ok, "failure_rate": (N - n_ok) / N if N else float("nan")}
    if n_ok == 0:
        nan = np.full(J, np.nan)
        out.update(coef_err=float("nan"), fwd_err=float("nan"), bias=nan, variance=nan, mse=nan, coverage=nan)
        return out
    Pi = P[ok]
    # correctly rounded sums keep the means independent of summation order
    out["coef_err"] = math.fsum(ce[ok]) / n_ok
    out["fwd_err"] = math.fsum(fe[ok]) / n_ok
    pbar = np.array([math.fsum(col) for col in Pi.T]) / n_ok
    sq_b = (Pi - p_true) ** 2 / p_true**2
    sq_v = (Pi - pbar) ** 2 / p_true**2
    out["bias"] = np.median(sq_b, axis=0)
    out["variance"] = np.median(sq_v, axis=0)
    out["mse"] = np.median(sq_b + sq_v, axis=0)
    if stderrs is None:
        out["coverage"] = np.full(J, np.nan)
    else:
        se = np.asarray(stderrs, dtype=float)[ok]
        hit = np.abs(Pi - p_true) < 2.0 * se
        out["coverage"] = np.sum(hit, axis=0) / n_ok
    return out


def _parse_vec(s: str, J: int) -> np.ndarray:
    if s == "":
        return np.full(J, np.nan)
    return np.array([float(v) for v in s.split(";")])


def summarize(rows: Sequence[dict]) -> list:
    """Aggregate result rows per (system, M, T, noise_ratio, method)."""
    groups = {}
    for r in rows:
        k = (r["system"], int(r["M"]), float(r["T"]), float(r["noise_ratio"]), r["method"])
        groups.setdefault(k, []).append(r)
    out = []
    for k in sorted(groups, key=lambda k: (k[0], k[1], k[2], k[3], METHODS.index(k[4]))):
        g = sorted(groups[k], key=lambda r: int(r["trial"]))
        s = builtin(k[0], k[2])
        J = s.model.J
        P = np.array([_vec(r["p_hat"], J) for r in g])
        se = np.array([_vec(r["stderr"], J) for r in g])
        m = compute_metrics(P, s.p_true, [float(r["coef_err"]) for r in g], [float(r["fwd_err"]) for r in g], se)
        out.append({"system": k[0], "M": k[1], "T": k[2], "noise_ratio": k[3], "method": k[4], **m})
    return out


def _vec(v, J):
    if v is None:
        return np.full(J, np.nan)
    if isinstance(v, str):
        return _parse_vec(v, J)
    return np.asarray(v, dtype=float)


# ---------------------------------------------------------------------------
# sweeps and persistence


def _worker_init():
    # a single BLAS thread per process keeps results identical for any worker count
    threadpool_limits(1)


def _run_one(spec):
    with threadpool_limits(1):
        return run_trial(spec)


def run_sweep(cfg: SweepConfig, threads: int = 1, progress=None) -> list:
    """Run all trials of ``cfg``; returns result rows in canonical trial order."""
    specs = expand(cfg)
    rows = {}
    if threads <= 1:
        for spec in specs:
            rows[spec.key] = _run_one(spec)
            if progress:
                progress(spec)
    else:
        with ProcessPoolExecutor(max_workers=threads, initializer=_worker_init) as ex:
            futures = {ex.submit(_run_one, spec): spec for spec in specs}
            for fut, spec in futures.items():
                rows[spec.key] = fut.result()
                if progress:
                    progress(spec)
    return [r for spec in specs for r in rows[spec.key]]


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in RESULT_COLUMNS])
    return buf.getvalue()


def read_results(path: str) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


SUMMARY_COLUMNS = ("system", "M", "T", "noise_ratio", "method", "N", "n_success", "failure_rate",
                   "coef_err", "fwd_err", "bias", "variance", "mse", "coverage")


def summary_to_csv(summary: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in summary:
        w.writerow([_fmt(s[c]) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def write_outputs(cfg: SweepConfig, rows: Sequence[dict], out_dir: str, threads: int = 1) -> dict:
    """Write ``results.csv``, ``summary.csv`` and ``manifest.json`` to ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "results": os.path.join(out_dir, "results.csv"),
        "summary": os.path.join(out_dir, "summary.csv"),
        "manifest": os.path.join(out_dir, "manifest.json"),
    }
    with open(paths["results"], "w", newline="") as fh:
        fh.write(rows_to_csv(rows))
    with open(paths["summary"], "w", newline="") as fh:
        fh.write(summary_to_csv(summarize(rows)))
    manifest = {
        "config": asdict(cfg),
        "seed": cfg.seed,
        "code_version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "threads": threads,
        "n_trials": len({(r["system"], r["M"], r["T"], r["noise_ratio"], r["trial"]) for r in rows}),
        "files": {k: os.path.basename(v) for k, v in paths.items() if k != "manifest"},
    }
    with open(paths["manifest"], "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return paths

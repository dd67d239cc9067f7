"""Command-line interface: ``wendy simulate | estimate | benchmark``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .bench import CONVENTIONS, ConfigError, corrupt, load_config, run_sweep, summarize, write_outputs
from .integrate import simulate, uniform_grid
from .model import builtin, builtin_names
from .solvers import METHODS, estimate
from .weakform import NumericalFailure, build_problem

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _write_csv(path, grid, U):
    header = "t," + ",".join(f"u{d + 1}" for d in range(U.shape[1]))
    data = np.column_stack([grid, U])
    if path == "-":
        np.savetxt(sys.stdout, data, delimiter=",", header=header, comments="", fmt="%.17g")
    else:
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def read_csv(path):
    """Read ``t,u1..uD`` data; returns (grid, U)."""
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read data file {path!r}: {e}") from None
    if not header or header[0].strip() != "t" or data.shape[1] != len(header) or data.shape[1] < 2:
        raise ConfigError(f"{path}: expected a header 't,u1,...,uD' matching the columns")
    grid, U = data[:, 0], data[:, 1:]
    steps = np.diff(grid)
    if steps.size < 4 or np.any(steps <= 0) or np.ptp(steps) > 1e-8 * max(abs(steps[0]), 1e-300) + 1e-12:
        raise ConfigError(f"{path}: time column must be a uniform increasing grid with at least 5 points")
    return grid, U


def _system(name, T=None):
    try:
        return builtin(name, T)
    except KeyError as e:
        raise ConfigError(str(e.args[0])) from None


def _parse_floats(s, n, what):
    try:
        v = np.array([float(x) for x in s.split(",")])
    except ValueError:
        raise ConfigError(f"{what} must be a comma-separated list of numbers") from None
    if v.size != n:
        raise ConfigError(f"{what} needs {n} values, got {v.size}")
    return v


def cmd_simulate(args) -> int:
    s = _system(args.system, args.T)
    grid = uniform_grid(s.T, args.M)
    tr = simulate(s.model, s.p_true, s.u0, grid)
    if not tr.ok:
        print(f"simulation failed: {tr.message}", file=sys.stderr)
        return EXIT_NUMERICAL
    U = tr.U
    if args.noise_ratio > 0:
        rng = np.random.default_rng(args.seed)
        U = corrupt(U, s.noise, args.noise_ratio, rng, args.noise_variance_convention)
    _write_csv(args.out, grid, U)
    return EXIT_OK


def cmd_estimate(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.data.lower().endswith(".csv"):
        if not args.system:
            raise ConfigError("--system is required when estimating from a CSV file")
        s = _system(args.system)
        grid, U = read_csv(args.data)
        if U.shape[1] != s.model.D:
            raise ConfigError(f"{args.data} has {U.shape[1]} states but {s.name} has {s.model.D}")
        truth = None
    else:
        s = _system(args.data, args.T)
        grid = uniform_grid(s.T, args.M)
        tr = simulate(s.model, s.p_true, s.u0, grid)
        if not tr.ok:
            print(f"simulation failed: {tr.message}", file=sys.stderr)
            return EXIT_NUMERICAL
        truth = tr.U
        U = corrupt(truth, s.noise, args.noise_ratio, rng, args.noise_variance_convention)
    p0 = (_parse_floats(args.p0, s.model.J, "--p0") if args.p0
          else rng.uniform(s.init_box[:, 0], s.init_box[:, 1]))
    if args.bounds == "auto":
        bounds = s.active_bounds()
    elif args.bounds == "box":
        bounds = s.bounds if s.bounds is not None else s.init_box
    else:
        bounds = None
    sigma2 = 0.0 if (truth is not None and args.noise_ratio == 0) else None
    try:
        problem = None
        if args.method != "oels" or args.dump_basis:
            problem = build_problem(s.model, U, grid, noise=s.noise, sigma2=sigma2)
        if args.dump_basis:
            np.savez(args.dump_basis, Phi=problem.basis.Phi, PhiDot=problem.basis.PhiDot,
                     radii=np.array(problem.basis.radii), min_radius=problem.basis.min_radius,
                     singular_values=problem.basis.singular_values)
        res = estimate(args.method, s.model, U, grid, p0, noise=s.noise, sigma2=sigma2,
                       bounds=None if args.method == "oels" else bounds, problem=problem)
    except NumericalFailure as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    out = res.to_dict()
    out["system"] = s.name
    out["p0"] = p0.tolist()
    if truth is not None:
        out["p_true"] = s.p_true.tolist()
        out["coef_err"] = float(np.linalg.norm(res.p_hat - s.p_true) / np.linalg.norm(s.p_true))
    json.dump(out, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK if res.success else EXIT_NUMERICAL


def cmd_benchmark(args) -> int:
    cfg = load_config(args.config)
    if args.noise_variance_convention:
        cfg.noise_variance_convention = args.noise_variance_convention
    cfg.validate()

    def progress(spec):
        if args.verbose:
            print(f"done {spec.system} M={spec.M} T={spec.T:g} nr={spec.noise_ratio:g} trial={spec.trial}",
                  file=sys.stderr)

    rows = run_sweep(cfg, threads=args.threads, progress=progress)
    paths = write_outputs(cfg, rows, args.out_dir, threads=args.threads)
    for s in summarize(rows):
        print(f"{s['system']:>16} M={s['M']:<5d} T={s['T']:<6g} nr={s['noise_ratio']:<6g} {s['method']:>6}: "
              f"fail {s['failure_rate']:.2f}  coef {s['coef_err']:.4g}  fwd {s['fwd_err']:.4g}")
    print(f"results written to {paths['results']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wendy", description="Weak-form ODE parameter estimation.")
    sub = p.add_subparsers(dest="command", required=True)
    conv = dict(choices=CONVENTIONS, default="linear",
                help="noise variance is proportional to the noise ratio (linear) or its square")

    s = sub.add_parser("simulate", help="simulate a built-in system and write CSV")
    s.add_argument("system", choices=builtin_names() + [n.replace("-", "_") for n in builtin_names()])
    s.add_argument("--M", type=int, default=256, help="number of intervals (M+1 samples)")
    s.add_argument("--T", type=float, default=None, help="final time (default: system's)")
    s.add_argument("--out", default="-", help="output CSV path, '-' for stdout")
    s.add_argument("--noise-ratio", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise-variance-convention", **conv)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="estimate parameters of a built-in system or from a CSV file")
    e.add_argument("data", help="built-in system name, or a CSV file with header t,u1..uD")
    e.add_argument("--system", help="model to fit when DATA is a CSV file")
    e.add_argument("--method", choices=METHODS, default="mle")
    e.add_argument("--noise-ratio", type=float, default=0.05, help="noise added to simulated data")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--M", type=int, default=256)
    e.add_argument("--T", type=float, default=None)
    e.add_argument("--p0", help="comma-separated initial guess (default: uniform draw from the init box)")
    e.add_argument("--bounds", choices=("auto", "none", "box"), default="auto",
                   help="auto: the system's default; box: always use the init box; none: unconstrained")
    e.add_argument("--dump-basis", metavar="NPZ", help="save the test-function basis to this file")
    e.add_argument("--noise-variance-convention", **conv)
    e.set_defaults(func=cmd_estimate)

    b = sub.add_parser("benchmark", help="run a benchmark sweep from a TOML or JSON config")
    b.add_argument("--config", required=True)
    b.add_argument("--threads", type=int, default=1, help="worker processes")
    b.add_argument("--out-dir", default="bench_out")
    b.add_argument("--noise-variance-convention", choices=CONVENTIONS, default=None,
                   help="override the config's convention")
    b.add_argument("-v", "--verbose", action="store_true")
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

"""Acceptance criteria.  Each test prints one PASS/FAIL line, collected in the terminal summary.

Run alone with ``pytest tests/test_acceptance.py -v``; the full set takes
well over an hour on one core.
"""

import filecmp
import time
from fractions import Fraction

import numpy as np
import pytest

from wendy import builtin
from wendy.bench import SweepConfig, compute_metrics, corrupt, noise_variance, run_sweep, summarize, truth_data
from wendy.cli import main as cli_main
from wendy.integrate import simulate, uniform_grid
from wendy.likelihood import WeakLikelihood
from wendy.solvers import wendy_mle
from wendy.testfn import TestFunctionBasis, build_basis
from wendy.weakform import build_problem

pytestmark = pytest.mark.acceptance

REPORT = []


def report(n, ok, detail, elapsed, budget):
    within = elapsed <= budget
    line = (f"criterion {n:>2}: {'PASS' if ok and within else 'FAIL'}  {detail}  "
            f"[{elapsed:.0f}s, budget {budget:.0f}s{'' if within else ', OVER BUDGET'}]")
    REPORT.append(line)
    print(line)
    return ok and within


def fd_gradient(f, p, h):
    g = np.empty(p.size)
    for j in range(p.size):
        e = np.zeros(p.size)
        e[j] = h[j]
        g[j] = (f(p + e) - f(p - e)) / (2 * h[j])
    return g


def fd_jacobian(f, p, h):
    cols = []
    for j in range(p.size):
        e = np.zeros(p.size)
        e[j] = h[j]
        cols.append((f(p + e) - f(p - e)) / (2 * h[j]))
    return np.column_stack(cols)


def sweep(system, methods, trials, noise_ratio=0.05, M=256, **kw):
    cfg = SweepConfig(systems=[system], M=[M], noise_ratios=[noise_ratio], trials=trials, seed=2024,
                      methods=methods, **kw).validate()
    rows = run_sweep(cfg)
    return rows, {s["method"]: s for s in summarize(rows)}


def test_criterion_01_derivatives():
    t0 = time.monotonic()
    worst_g, worst_h, n_pts = 0.0, 0.0, 0
    rng = np.random.default_rng(1)
    for name in ("lorenz", "hindmarsh_rose", "goodwin", "sir_tdi"):
        s = builtin(name)
        grid, truth = truth_data(s.name, 128, s.T)
        U = corrupt(truth, s.noise, 0.05, rng)
        lik = WeakLikelihood(build_problem(s.model, U, grid, noise=s.noise))
        for _ in range(20):
            p = rng.uniform(s.init_box[:, 0], s.init_box[:, 1])
            h = 1e-5 * np.maximum(np.abs(p), 1e-2)
            g = lik.gradient(p)
            H = lik.hessian(p)
            g_fd = fd_gradient(lik.value, p, h)
            H_fd = fd_jacobian(lik.gradient, p, h)
            worst_g = max(worst_g, np.linalg.norm(g - g_fd) / np.linalg.norm(g_fd))
            worst_h = max(worst_h, np.linalg.norm(H - H_fd) / np.linalg.norm(H_fd))
            n_pts += 1
    ok = worst_g <= 1e-5 and worst_h <= 1e-4
    assert report(1, ok, f"{n_pts} points: max rel grad err {worst_g:.1e} (<=1e-5), Hessian {worst_h:.1e} (<=1e-4)",
                  time.monotonic() - t0, 120)


def test_criterion_02_whitened_residual():
    t0 = time.monotonic()
    s = builtin("hindmarsh_rose")
    M, nr, draws = 512, 0.01, 500
    grid = uniform_grid(s.T, M)
    truth = simulate(s.model, s.p_true, s.u0, grid).U
    sigma2 = noise_variance(truth, nr)
    # one basis from an independent draw keeps the residual coordinates fixed across draws
    basis = build_basis(corrupt(truth, "additive", nr, np.random.default_rng(10_000)), grid)
    Z = []
    for i in range(draws):
        U = corrupt(truth, "additive", nr, np.random.default_rng(i))
        pr = build_problem(s.model, U, grid, basis=basis, sigma2=sigma2)
        Z.append(WeakLikelihood(pr, use_affine=False).whitened_residual(s.p_true))
    Z = np.array(Z)
    mean_max = np.abs(Z.mean(axis=0)).max()
    var = Z.var(axis=0, ddof=1)
    ok = mean_max < 0.15 and var.min() >= 0.7 and var.max() <= 1.3
    assert report(2, ok, f"K={basis.K}: max |mean| {mean_max:.3f} (<0.15), variance in [{var.min():.3f}, "
                         f"{var.max():.3f}] (within [0.7, 1.3])", time.monotonic() - t0, 300)


def test_criterion_03_noiseless_recovery():
    t0 = time.monotonic()
    counts = {}
    for name in ("lorenz", "hindmarsh_rose", "goodwin", "sir_tdi"):
        s = builtin(name)
        # at M = 256 Hindmarsh-Rose bursts are under-resolved and quadrature error alone costs 1%
        grid, truth = truth_data(s.name, 512, s.T)
        pr = build_problem(s.model, truth, grid, noise=s.noise, sigma2=0.0)
        hits = 0
        for seed in range(10):
            p0 = np.random.default_rng(seed).uniform(s.init_box[:, 0], s.init_box[:, 1])
            res = wendy_mle(pr, p0, s.active_bounds())
            err = np.linalg.norm(res.p_hat - s.p_true) / np.linalg.norm(s.p_true)
            hits += bool(res.fell_back and err < 1e-3)
        counts[s.name] = hits
    ok = all(c >= 8 for c in counts.values())
    detail = ", ".join(f"{k} {v}/10" for k, v in counts.items())
    assert report(3, ok, f"error < 1e-3: {detail} (need >= 8/10 each)", time.monotonic() - t0, 600)


def test_criterion_04_lorenz_horizon():
    t0 = time.monotonic()
    cfg = SweepConfig(systems=["lorenz"], T=[3.0, 15.0, 30.0], dt=0.01, noise_ratios=[0.1], trials=10,
                      seed=2024, methods=["mle", "oels"]).validate()
    rows = run_sweep(cfg)
    med = {}
    for r in rows:
        med.setdefault((r["method"], r["T"]), []).append(r["coef_err"])
    med = {k: float(np.median(v)) for k, v in med.items()}
    mle_ratio = med[("mle", 30.0)] / med[("mle", 3.0)]
    oe_ratio = med[("oels", 30.0)] / med[("oels", 3.0)]
    ok = mle_ratio <= 2 and oe_ratio >= 3
    detail = (f"median MLE err T=3/15/30 {med[('mle', 3.0)]:.3g}/{med[('mle', 15.0)]:.3g}/{med[('mle', 30.0)]:.3g} "
              f"(ratio {mle_ratio:.2f} <= 2); OE-LS {med[('oels', 3.0)]:.3g}/{med[('oels', 15.0)]:.3g}/"
              f"{med[('oels', 30.0)]:.3g} (ratio {oe_ratio:.2f} >= 3)")
    assert report(4, ok, detail, time.monotonic() - t0, 1800)


def test_criterion_05_hindmarsh_rose_robustness():
    t0 = time.monotonic()
    _, summ = sweep("hindmarsh_rose", ["mle", "irls"], 20)
    f_mle, f_irls = summ["mle"]["failure_rate"], summ["irls"]["failure_rate"]
    ok = f_mle == 0 and f_irls >= f_mle
    detail = (f"MLE failures {f_mle * 20:.0f}/20 (need 0), IRLS {f_irls * 20:.0f}/20 (>= MLE); "
              f"mean coef err MLE {summ['mle']['coef_err']:.3g}, IRLS {summ['irls']['coef_err']:.3g}")
    assert report(5, ok, detail, time.monotonic() - t0, 1200)


def test_criterion_06_goodwin():
    t0 = time.monotonic()
    rows, summ = sweep("goodwin", ["mle", "wls"], 20)
    med = {m: float(np.median([r["coef_err"] for r in rows if r["method"] == m])) for m in ("mle", "wls")}
    reference = {"bias": 0.000357, "variance": 0.00388, "mse": 0.00867}
    got = {k: float(np.median(summ["mle"][k])) for k in reference}
    within = all(0.1 <= got[k] / reference[k] <= 10 for k in reference)
    ok = med["mle"] < 0.25 and med["mle"] < med["wls"] and within
    detail = (f"median coef err MLE {med['mle']:.3g} (<0.25, < WLS {med['wls']:.3g}); median bias/variance/MSE "
              + "/".join(f"{got[k]:.3g}" for k in reference) + " vs reference " + "/".join(f"{reference[k]:g}" for k in reference)
              + " (within 10x)")
    assert report(6, ok, detail, time.monotonic() - t0, 1800)


def test_criterion_07_sir_constrained():
    t0 = time.monotonic()
    _, summ = sweep("sir_tdi", ["mle", "hybrid"], 20)
    f_mle, f_hyb = summ["mle"]["failure_rate"], summ["hybrid"]["failure_rate"]
    cov = float(np.median(summ["mle"]["coverage"]))
    ok = f_mle == 0 and f_hyb == 0 and cov >= 0.9
    detail = (f"failures MLE {f_mle * 20:.0f}/20, hybrid {f_hyb * 20:.0f}/20 (need 0); "
              f"median coverage {cov:.2f} (>= 0.90)")
    assert report(7, ok, detail, time.monotonic() - t0, 1800)


def _timing_problem(M, K, rng):
    s = builtin("goodwin")
    grid = uniform_grid(s.T, M)
    U = simulate(s.model, s.p_true, s.u0, grid).U
    Q, _ = np.linalg.qr(rng.standard_normal((M + 1, K)))
    Qd, _ = np.linalg.qr(rng.standard_normal((M + 1, K)))
    basis = TestFunctionBasis(Q.T.copy(), Qd.T.copy(), grid[1] - grid[0], [1], 1, np.ones(K))
    return s, build_problem(s.model, U, grid, noise="lognormal", basis=basis, sigma2=0.01)


def _hessian_time(M, K, rng, reps=3):
    s, pr = _timing_problem(M, K, rng)
    lik = WeakLikelihood(pr, use_affine=False)
    best = np.inf
    for i in range(reps):
        p = s.p_true * (1 + 1e-3 * (i + 1))
        t = time.perf_counter()
        lik.hessian(p)
        best = min(best, time.perf_counter() - t)
    return best


def test_criterion_08_complexity():
    t0 = time.monotonic()
    rng = np.random.default_rng(0)
    Ms = np.array([2000, 4000, 8000, 16000])
    tM = [_hessian_time(M, 20, rng) for M in Ms]
    Ks = np.array([60, 90, 135, 200])
    tK = [_hessian_time(400, K, rng) for K in Ks]
    slope_M = np.polyfit(np.log(Ms), np.log(tM), 1)[0]
    slope_K = np.polyfit(np.log(Ks), np.log(tK), 1)[0]
    ok = abs(slope_M - 1) <= 0.3 and abs(slope_K - 3) <= 0.5
    detail = (f"Hessian time slope in M {slope_M:.2f} (1 +- 0.3, K=20), in K {slope_K:.2f} (3 +- 0.5, M=400); "
              f"Goodwin NiP, D=3, J=8")
    assert report(8, ok, detail, time.monotonic() - t0, 900)


def _oracle_mean(values):
    return float(sum(Fraction(v) for v in values)) / len(values)


def test_criterion_09_metric_oracle():
    t0 = time.monotonic()
    rng = np.random.default_rng(99)
    p_true = np.array([2.0, -0.5, 7.0])
    N = 10
    P = p_true * (1 + 0.2 * rng.standard_normal((N, 3)))
    se = np.abs(p_true) * rng.uniform(0.05, 0.3, (N, 3))
    ce = np.linalg.norm(P - p_true, axis=1) / np.linalg.norm(p_true)
    fe = rng.uniform(0.0, 1.0, N)
    ce[2], fe[6] = 40.0, np.nan
    m = compute_metrics(P, p_true, ce, fe, se)
    good = [n for n in range(N) if ce[n] < 25 and fe[n] < 25]
    exact = (m["failure_rate"] == (N - len(good)) / N
             and m["coef_err"] == _oracle_mean([ce[n] for n in good])
             and m["fwd_err"] == _oracle_mean([fe[n] for n in good]))
    close = True
    for j in range(3):
        pbar = _oracle_mean([P[n, j] for n in good])
        b = sorted((P[n, j] - p_true[j]) ** 2 / p_true[j] ** 2 for n in good)
        v = sorted((P[n, j] - pbar) ** 2 / p_true[j] ** 2 for n in good)
        mse = sorted((P[n, j] - p_true[j]) ** 2 / p_true[j] ** 2 + (P[n, j] - pbar) ** 2 / p_true[j] ** 2
                     for n in good)
        mid = len(good) // 2
        med = (lambda x: x[mid] if len(x) % 2 else 0.5 * (x[mid - 1] + x[mid]))
        cov = sum(abs(P[n, j] - p_true[j]) < 2 * se[n, j] for n in good) / len(good)
        close &= abs(m["bias"][j] - med(b)) <= 1e-12 * max(med(b), 1e-300)
        close &= abs(m["variance"][j] - med(v)) <= 1e-12 * max(med(v), 1e-300)
        close &= abs(m["mse"][j] - med(mse)) <= 1e-12 * max(med(mse), 1e-300)
        close &= m["coverage"][j] == cov
    ok = bool(exact and close)
    assert report(9, ok, f"10-trial fixture: sums bit-exact {exact}, medians within 1e-12 {close}",
                  time.monotonic() - t0, 1)


def test_criterion_10_determinism(tmp_path):
    t0 = time.monotonic()
    cfg = tmp_path / "run.toml"
    cfg.write_text('systems = ["lorenz", "goodwin"]\nM = [128]\nnoise_ratios = [0.05]\ntrials = 2\n'
                   'methods = ["wls", "irls", "mle", "hybrid"]\nseed = 7\n')
    codes = [cli_main(["benchmark", "--config", str(cfg), "--threads", str(n), "--out-dir", str(tmp_path / f"o{n}")])
             for n in (1, 2)]
    same = filecmp.cmp(tmp_path / "o1" / "results.csv", tmp_path / "o2" / "results.csv", shallow=False)
    ok = codes == [0, 0] and same
    assert report(10, ok, f"results.csv identical for 1 and 2 worker processes: {same}", time.monotonic() - t0, 600)

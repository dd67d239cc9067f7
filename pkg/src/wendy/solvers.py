"""Parameter estimators: WLS, WENDy-IRLS, WENDy-MLE, output-error LS and the hybrid."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

from .integrate import simulate, simulate_sensitivities
from .likelihood import WeakLikelihood, estimator_covariance
from .model import OdeModel
from .optimize import SolveReport, levenberg_marquardt, trust_region_newton
from .weakform import (
    NumericalFailure,
    WeakProblem,
    build_problem,
    cholesky_jitter,
    covariance,
    evaluate_grid,
    grad_g,
    residual,
)

METHODS = ("wls", "irls", "mle", "oels", "hybrid")
HYBRID_THRESHOLD = 0.05
TIME_LIMIT = 200.0
STATIONARITY_TOL = 1e-6


@dataclass
class EstimationResult:
    """Estimate plus diagnostics.  ``success`` is False only on numerical failure."""

    method: str
    p_hat: np.ndarray
    success: bool
    termination: str
    iterations: int = 0
    nll: float = np.nan
    covariance: Optional[np.ndarray] = None
    u0_hat: Optional[np.ndarray] = None
    fell_back: bool = False
    message: str = ""
    wall_time: float = 0.0
    details: dict = field(default_factory=dict, repr=False)

    @property
    def stderr(self) -> Optional[np.ndarray]:
        if self.covariance is None:
            return None
        return np.sqrt(np.maximum(np.diag(self.covariance), 0.0))

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float).tolist()

        return {
            "method": self.method,
            "p_hat": arr(self.p_hat),
            "success": bool(self.success),
            "termination": self.termination,
            "iterations": int(self.iterations),
            "nll": None if not np.isfinite(self.nll) else float(self.nll),
            "covariance": arr(self.covariance),
            "stderr": arr(self.stderr),
            "u0_hat": arr(self.u0_hat),
            "fell_back": bool(self.fell_back),
            "message": self.message,
        }


def _failed(method, p, msg, t0, termination="numerical_failure"):
    return EstimationResult(method, np.asarray(p, dtype=float).copy(), False, termination,
                            message=msg, wall_time=time.monotonic() - t0)


def _safe_covariance(problem, p):
    try:
        C = estimator_covariance(problem, p)
    except (NumericalFailure, np.linalg.LinAlgError, ValueError):
        return None
    return C if np.all(np.isfinite(C)) else None


def _safe_nll(problem, p, lik=None):
    lik = lik if lik is not None else WeakLikelihood(problem, use_affine=False)
    return lik.safe_value(p)


# ---------------------------------------------------------------------------
# weighted least squares


def _wls_solve(problem, p0, weight=None, bounds=None, time_limit=TIME_LIMIT):
    """Minimize ||W^-1 (g(p) - b)||^2 with ``weight`` a lower Cholesky factor (or identity)."""
    def apply(v):
        return v if weight is None else solve_triangular(weight, v, lower=True, check_finite=False)

    if problem.model.linear_in_params and bounds is None:
        zero = np.zeros(problem.J)
        ev = evaluate_grid(problem, zero)
        A = apply(grad_g(problem, zero, ev))
        y = -apply(residual(problem, zero, ev))
        p, *_ = np.linalg.lstsq(A, y, rcond=None)
        return SolveReport(p, 0.5 * float(np.sum((A @ p - y) ** 2)), 1, "grad_tol")

    def res(p):
        ev = evaluate_grid(problem, p)
        return apply(residual(problem, p, ev))

    def jac(p):
        return apply(grad_g(problem, p))

    return levenberg_marquardt(res, jac, p0, bounds, time_limit=time_limit)


def wls(problem: WeakProblem, p0, bounds=None, time_limit: float = TIME_LIMIT) -> EstimationResult:
    """Unweighted weak-form least squares, ``min ||r(p)||``.

    Affine-in-parameter models without bounds are solved directly; others
    by Levenberg-Marquardt from ``p0``.
    """
    t0 = time.monotonic()
    p0 = np.asarray(p0, dtype=float)
    with np.errstate(all="ignore"):
        rep = _wls_solve(problem, p0, bounds=bounds, time_limit=time_limit)
    if not np.all(np.isfinite(rep.x)):
        return _failed("wls", p0, "non-finite estimate", t0)
    return EstimationResult("wls", rep.x, rep.success, rep.termination, rep.iterations,
                            covariance=_safe_covariance(problem, rep.x), message=rep.message,
                            wall_time=time.monotonic() - t0)


# ---------------------------------------------------------------------------
# iteratively reweighted least squares


def wendy_irls(problem: WeakProblem, p0, bounds=None, max_iter: int = 1000, abstol: float = 1e-8,
               reltol: float = 1e-8, time_limit: float = TIME_LIMIT) -> EstimationResult:
    """Fixed-point iteration ``p_{i+1} = argmin ||S(p_i)^{-1/2} r(p)||``, started at the WLS estimate."""
    t0, c0 = time.monotonic(), time.process_time()
    p0 = np.asarray(p0, dtype=float)
    with np.errstate(all="ignore"):
        first = _wls_solve(problem, p0, bounds=bounds, time_limit=time_limit)
        p = first.x
        if not np.all(np.isfinite(p)):
            return _failed("irls", p0, "initial least-squares solve failed", t0)
        termination = "max_iter"
        it = 0
        msg = ""
        while it < max_iter:
            left = time_limit - (time.process_time() - c0)
            if left <= 0:
                termination = "time_limit"
                break
            it += 1
            try:
                Lc, _ = cholesky_jitter(covariance(problem, p))
            except NumericalFailure as exc:
                return _failed("irls", p, f"covariance failed at iteration {it}: {exc}", t0)
            rep = _wls_solve(problem, p, weight=Lc, bounds=bounds, time_limit=left)
            p_new = rep.x
            if not np.all(np.isfinite(p_new)):
                return _failed("irls", p, f"non-finite iterate at iteration {it}", t0)
            dp = np.linalg.norm(p_new - p)
            p = p_new
            if dp <= abstol or dp <= reltol * np.linalg.norm(p):
                termination = "step_tol"
                break
    nll = _safe_nll(problem, p)
    return EstimationResult("irls", p, True, termination, it, nll=nll,
                            covariance=_safe_covariance(problem, p), message=msg,
                            wall_time=time.monotonic() - t0)


# ---------------------------------------------------------------------------
# maximum likelihood


def is_noiseless(problem: WeakProblem) -> bool:
    """True if the noise variances are zero (or negligible next to the data scale)."""
    scale = np.mean(problem.X**2, axis=0)
    return bool(np.all(problem.sigma2 <= 1e-14 * np.maximum(scale, 1e-300)))


def wendy_mle(problem: WeakProblem, p0, bounds=None, *, max_iter: int = 200, time_limit: float = TIME_LIMIT,
              abstol: float = 1e-8, reltol: float = 1e-8, likelihood: Optional[WeakLikelihood] = None
              ) -> EstimationResult:
    """Minimize the weak-form negative log-likelihood by trust-region Newton.

    Falls back to :func:`wls` (flagged by ``fell_back``) if the data are
    noiseless or the covariance cannot be factorized at ``p0``.
    """
    t0 = time.monotonic()
    p0 = np.asarray(p0, dtype=float)
    if bounds is not None:
        b = np.asarray(bounds, dtype=float)
        p0 = np.clip(p0, b[:, 0], b[:, 1])
    if is_noiseless(problem):
        res = wls(problem, p0, bounds=bounds, time_limit=time_limit)
        res.method, res.fell_back, res.message = "mle", True, "noiseless data: weighted least squares used"
        return res
    lik = likelihood if likelihood is not None else WeakLikelihood(problem)
    with np.errstate(all="ignore"):
        if not np.isfinite(lik.safe_value(p0)):
            res = wls(problem, p0, bounds=bounds, time_limit=time_limit)
            res.method, res.fell_back = "mle", True
            res.message = "covariance not positive definite at the initial guess: weighted least squares used"
            return res
        rep = trust_region_newton(lik.safe_value, lik.gradient, lik.hessian, p0, bounds, abstol=abstol,
                                  reltol=reltol, max_iter=max_iter, time_limit=time_limit,
                                  stationarity_tol=STATIONARITY_TOL)
    ok = rep.success and np.all(np.isfinite(rep.x))
    return EstimationResult("mle", rep.x, bool(ok), rep.termination, rep.iterations, nll=rep.fun,
                            covariance=_safe_covariance(problem, rep.x) if ok else None,
                            message=rep.message, wall_time=time.monotonic() - t0,
                            details={"grad_norm": rep.grad_norm, "likelihood_evals": lik.nevals})


# ---------------------------------------------------------------------------
# output-error least squares


def oe_ls(model: OdeModel, U, grid, p0, u0_init=None, bounds=None, *, max_iter: int = 200,
          time_limit: float = TIME_LIMIT, reltol: float = 1e-8, abstol: float = 1e-8) -> EstimationResult:
    """Fit parameters and initial condition by matching simulated trajectories to data.

    Minimizes ``||U_hat(p, u0) - U||_F`` with Levenberg-Marquardt and forward
    sensitivities.  ``u0_init`` defaults to the first data row.  Failed
    simulations reject the trial step.
    """
    t0 = time.monotonic()
    U = np.asarray(U, dtype=float)
    grid = np.asarray(grid, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    J, D = model.J, model.D
    u0 = U[0].copy() if u0_init is None else np.asarray(u0_init, dtype=float)
    x0 = np.concatenate([p0, u0])
    xb = None
    if bounds is not None:
        b = np.asarray(bounds, dtype=float)
        xb = np.vstack([b, np.column_stack([np.full(D, -np.inf), np.full(D, np.inf)])])
    cache = {}

    def sens(x):
        key = x.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = simulate_sensitivities(model, x[:J], x[J:], grid, reltol=reltol, abstol=abstol)
        return cache[key]

    def res(x):
        if x.tobytes() in cache:
            tr = cache[x.tobytes()].traj
        else:
            tr = simulate(model, x[:J], x[J:], grid, reltol=reltol, abstol=abstol)
        if not tr.ok:
            return np.full(U.size, np.nan)
        return (tr.U - U).T.ravel()

    def jac(x):
        s = sens(x)
        if not s.traj.ok:
            return np.full((U.size, J + D), np.nan)
        Jp = np.transpose(s.dU_dp, (1, 0, 2)).reshape(-1, J)
        Ju = np.transpose(s.dU_du0, (1, 0, 2)).reshape(-1, D)
        return np.hstack([Jp, Ju])

    with np.errstate(all="ignore"):
        rep = levenberg_marquardt(res, jac, x0, xb, max_iter=max_iter, time_limit=time_limit)
    x = rep.x
    ok = rep.success and np.all(np.isfinite(x))
    return EstimationResult("oels", x[:J].copy(), bool(ok), rep.termination, rep.iterations,
                            u0_hat=x[J:].copy(), message=rep.message, wall_time=time.monotonic() - t0,
                            details={"cost": rep.fun})


# ---------------------------------------------------------------------------
# hybrid


def hybrid_choice(nll_mle: float, nll_oels: float, threshold: float = HYBRID_THRESHOLD) -> str:
    """Keep OE-LS unless its likelihood is more than ``threshold`` worse on the shifted scale.

    Both values are shifted by ``1 - min``; OE-LS is rejected (``"mle"``) if
    its shifted value exceeds the MLE's by more than the relative threshold,
    or if it is not finite.
    """
    if not np.isfinite(nll_oels):
        return "mle"
    if not np.isfinite(nll_mle):
        return "oels"
    lo = min(nll_mle, nll_oels)
    a = nll_mle - lo + 1.0
    b = nll_oels - lo + 1.0
    return "mle" if b > (1.0 + threshold) * a else "oels"


def hybrid(problem: WeakProblem, U, p0, bounds=None, *, time_limit: float = TIME_LIMIT,
           mle_result: Optional[EstimationResult] = None) -> EstimationResult:
    """WENDy-MLE, then OE-LS warm-started from its estimate; keep OE-LS unless it is clearly worse."""
    t0 = time.monotonic()
    model = problem.source_model if problem.source_model is not None else problem.model
    mle = mle_result if mle_result is not None else wendy_mle(problem, p0, bounds, time_limit=time_limit)
    if not mle.success:
        return _failed("hybrid", mle.p_hat, "initial MLE failed: " + mle.message, t0)
    # OE-LS always runs unconstrained; the likelihood check guards the choice
    oe = oe_ls(model, U, problem.grid, mle.p_hat, time_limit=time_limit)
    if is_noiseless(problem):
        # the likelihood is undefined without noise; compare squared weak residuals instead
        def score(p):
            with np.errstate(all="ignore"):
                v = float(np.sum(residual(problem, p) ** 2))
            return v if np.isfinite(v) else np.inf
    else:
        score = WeakLikelihood(problem, use_affine=False).safe_value
    l_mle = score(mle.p_hat)
    l_oe = score(oe.p_hat) if oe.success else np.inf
    pick = hybrid_choice(l_mle, l_oe)
    chosen = mle if pick == "mle" else oe
    return EstimationResult("hybrid", chosen.p_hat.copy(), True, chosen.termination,
                            mle.iterations + oe.iterations, nll=min(l_mle, l_oe) if pick == "oels" else l_mle,
                            covariance=_safe_covariance(problem, chosen.p_hat), u0_hat=oe.u0_hat,
                            fell_back=(pick == "mle"), message=f"kept {pick}",
                            wall_time=time.monotonic() - t0,
                            details={"nll_mle": l_mle, "nll_oels": l_oe, "oels_success": oe.success})


def estimate(method: str, model: OdeModel, U, grid, p0, *, noise: str = "additive", sigma2=None,
             bounds=None, time_limit: float = TIME_LIMIT, problem: Optional[WeakProblem] = None
             ) -> EstimationResult:
    """Run one estimator on raw data ``U`` sampled on ``grid``."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if method == "oels":
        return oe_ls(model, U, grid, p0, bounds=bounds, time_limit=time_limit)
    if problem is None:
        problem = build_problem(model, U, grid, noise=noise, sigma2=sigma2)
    if method == "wls":
        return wls(problem, p0, bounds, time_limit)
    if method == "irls":
        return wendy_irls(problem, p0, bounds, time_limit=time_limit)
    if method == "mle":
        return wendy_mle(problem, p0, bounds, time_limit=time_limit)
    return hybrid(problem, U, p0, bounds, time_limit=time_limit)

"""Box-constrained trust-region Newton and Levenberg-Marquardt solvers.

Both stop as soon as one of these holds (each tested against an absolute
and a relative tolerance): small projected gradient, small accepted step,
small change of the objective on an accepted step.  They also stop at
``max_iter`` iterations or after ``time_limit`` seconds of process CPU time, which
parallel workers sharing the machine do not inflate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

TERMINATIONS = ("grad_tol", "step_tol", "obj_tol", "max_iter", "time_limit", "numerical_failure")


@dataclass
class SolveReport:
    """Outcome of a local solve."""

    x: np.ndarray
    fun: float
    iterations: int
    termination: str
    grad_norm: float = np.nan
    nfev: int = 0
    message: str = ""
    history: list = field(default_factory=list, repr=False)

    @property
    def success(self) -> bool:
        return self.termination != "numerical_failure"


def _bounds(bounds, n):
    if bounds is None:
        return np.full(n, -np.inf), np.full(n, np.inf)
    b = np.asarray(bounds, dtype=float)
    if b.shape != (n, 2):
        raise ValueError(f"bounds must have shape ({n}, 2), got {b.shape}")
    lo, hi = b[:, 0].copy(), b[:, 1].copy()
    if np.any(lo > hi):
        raise ValueError("lower bounds exceed upper bounds")
    return lo, hi


def projected_gradient(x, g, lo, hi):
    """``x - clip(x - g)``: zero for components pinned at an active bound."""
    return x - np.clip(x - g, lo, hi)


def _steihaug(g, H, radius, tol, max_iter):
    """Truncated CG for min g^T y + y^T H y / 2 subject to ||y|| <= radius."""
    n = g.size
    y = np.zeros(n)
    r = g.copy()
    d = -r
    rr = r @ r
    if np.sqrt(rr) <= tol:
        return y, False
    for _ in range(max_iter):
        Hd = H @ d
        dHd = d @ Hd
        if dHd <= 0:
            return _to_boundary(y, d, radius), True
        alpha = rr / dHd
        y_next = y + alpha * d
        if np.linalg.norm(y_next) >= radius:
            return _to_boundary(y, d, radius), True
        y = y_next
        r = r + alpha * Hd
        rr_new = r @ r
        if np.sqrt(rr_new) <= tol:
            break
        d = -r + (rr_new / rr) * d
        rr = rr_new
    return y, False


def _to_boundary(y, d, radius):
    a = d @ d
    b = 2 * y @ d
    c = y @ y - radius**2
    tau = (-b + np.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)
    return y + tau * d


def trust_region_newton(fun: Callable, grad: Callable, hess: Callable, x0, bounds=None, *,
                        abstol: float = 1e-8, reltol: float = 1e-8, max_iter: int = 200,
                        time_limit: float = 200.0, initial_radius: Optional[float] = None,
                        stationarity_tol: Optional[float] = None, keep_history: bool = False) -> SolveReport:
    """Minimize ``fun`` with an affine-scaled trust-region Newton method.

    The subproblem is solved by Steihaug CG over the free variables;
    variables at a bound whose gradient points outward are held fixed and
    trial points are projected onto the box.  ``fun`` may return ``inf``
    (or raise ``FloatingPointError``/``ArithmeticError``) at points where
    it is undefined; such steps are rejected.  With ``stationarity_tol`` the
    step and objective-change exits are taken only once the projected
    gradient is below ``stationarity_tol * (1 + |f|)``.
    """
    t0 = time.process_time()
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    lo, hi = _bounds(bounds, n)
    x = np.clip(x, lo, hi)

    def safe(xx):
        try:
            v = float(fun(xx))
        except (ArithmeticError, np.linalg.LinAlgError, ValueError):
            return np.inf
        return v if np.isfinite(v) else np.inf

    f = safe(x)
    nfev = 1
    history = []
    if not np.isfinite(f):
        return SolveReport(x, f, 0, "numerical_failure", nfev=nfev, message="objective undefined at the initial point")
    g = np.asarray(grad(x), dtype=float)
    H = np.asarray(hess(x), dtype=float)
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
        return SolveReport(x, f, 0, "numerical_failure", nfev=nfev, message="derivatives not finite at the initial point")
    scale = np.sqrt(np.maximum(np.abs(np.diag(H)), 0.0))
    scale = np.maximum(scale, 1e-8 * max(scale.max(), 1.0))
    radius = initial_radius if initial_radius is not None else max(1.0, np.linalg.norm(scale * x))
    rejections = 0
    it = 0
    held = None
    termination = "max_iter"
    msg = ""
    while True:
        pg = projected_gradient(x, g, lo, hi)
        gn = float(np.max(np.abs(pg))) if n else 0.0
        if keep_history:
            history.append((x.copy(), f, gn))
        if gn <= abstol or gn <= reltol * abs(f):
            termination = "grad_tol"
            break
        if it >= max_iter:
            termination = "max_iter"
            break
        if time.process_time() - t0 > time_limit:
            termination = "time_limit"
            break
        it += 1

        free = ~(((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0)))
        sf = scale[free]
        gs = g[free] / sf
        Hs = H[np.ix_(free, free)] / np.outer(sf, sf)
        tol = min(0.5, np.sqrt(np.linalg.norm(gs))) * np.linalg.norm(gs)
        y, _ = _steihaug(gs, Hs, radius, tol, 2 * n + 10)
        step = np.zeros(n)
        step[free] = y / sf
        x_new = np.clip(x + step, lo, hi)
        s = x_new - x
        pred = -(g @ s + 0.5 * s @ H @ s)
        # projected Cauchy step as a fallback when projection spoils the model
        if not pred > 0:
            gg = gs @ gs
            gHg = gs @ Hs @ gs
            tau = radius / np.sqrt(gg)
            if gHg > 0:
                tau = min(tau, gg / gHg)
            step = np.zeros(n)
            step[free] = -tau * gs / sf
            x_new = np.clip(x + step, lo, hi)
            s = x_new - x
            pred = -(g @ s + 0.5 * s @ H @ s)
        f_new = safe(x_new) if np.any(s != 0) else f
        nfev += 1
        ared = f - f_new
        rho = ared / pred if pred > 0 else -np.inf
        if not np.isfinite(rho):
            rho = -np.inf
        snorm = np.linalg.norm(scale * s)
        if rho > 1e-4:
            rejections = 0
            x_old, f_old = x, f
            x, f = x_new, f_new
            g = np.asarray(grad(x), dtype=float)
            H = np.asarray(hess(x), dtype=float)
            if not (np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
                termination, msg = "numerical_failure", "derivatives not finite"
                break
            scale = np.maximum(scale, np.sqrt(np.abs(np.diag(H))))
            if rho > 0.75 and snorm > 0.9 * radius:
                radius *= 2.0
            elif rho < 0.25:
                radius = 0.25 * snorm
            dx = np.linalg.norm(x - x_old)
            df = abs(f_old - f)
            small = ("step_tol" if dx <= abstol or dx <= reltol * np.linalg.norm(x)
                     else "obj_tol" if df <= abstol or df <= reltol * abs(f) else None)
            if small and stationarity_tol is not None:
                pg = projected_gradient(x, g, lo, hi)
                if np.max(np.abs(pg)) > stationarity_tol * (1 + abs(f)):
                    held, small = small, None
            if small:
                termination = small
                break
        else:
            radius = 0.25 * (snorm if snorm > 0 else radius)
            rejections += 1
            if radius < 1e-14 and rejections >= 5:
                # a held-back small-change exit means progress stalled at roundoff level
                termination, msg = (held, "") if held else ("numerical_failure", "trust region collapsed")
                break
    if keep_history and (not history or history[-1][0] is not x):
        pg = projected_gradient(x, g, lo, hi)
        history.append((x.copy(), f, float(np.max(np.abs(pg)))))
    pg = projected_gradient(x, g, lo, hi)
    return SolveReport(x, f, it, termination, float(np.max(np.abs(pg))) if n else 0.0, nfev, msg, history)


def levenberg_marquardt(res: Callable, jac: Callable, x0, bounds=None, *, abstol: float = 1e-8,
                        reltol: float = 1e-8, max_iter: int = 200, time_limit: float = 200.0,
                        keep_history: bool = False) -> SolveReport:
    """Minimize ``||res(x)||^2 / 2`` by Levenberg-Marquardt.

    Starts from the Gauss-Newton step (so affine residuals converge in one
    step) and raises the damping ``lam * diag(D^2)`` on rejection, with
    ``D`` the running maximum of the Jacobian column norms.  ``res`` may
    return non-finite values or raise at bad points; such steps are
    rejected.  With ``bounds``, variables pinned at a bound by the gradient
    are held fixed and the step over the others is projected onto the box.
    """
    t0 = time.process_time()
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    lo, hi = _bounds(bounds, n)
    x = np.clip(x, lo, hi)

    def safe_res(xx):
        try:
            r = np.asarray(res(xx), dtype=float)
        except (ArithmeticError, np.linalg.LinAlgError, ValueError):
            return None
        return r if np.all(np.isfinite(r)) else None

    r = safe_res(x)
    nfev = 1
    if r is None:
        return SolveReport(x, np.inf, 0, "numerical_failure", nfev=nfev, message="residual undefined at the initial point")
    Jm = np.asarray(jac(x), dtype=float)
    if not np.all(np.isfinite(Jm)):
        return SolveReport(x, 0.5 * r @ r, 0, "numerical_failure", nfev=nfev, message="Jacobian not finite at the initial point")
    cost = 0.5 * r @ r
    dscale = np.linalg.norm(Jm, axis=0)
    dscale = np.maximum(dscale, 1e-12 * max(dscale.max(), 1.0))
    lam = 0.0
    nu = 2.0
    it = 0
    history = []
    termination, msg = "max_iter", ""
    while True:
        g = Jm.T @ r
        pg = projected_gradient(x, g, lo, hi)
        gn = float(np.max(np.abs(pg))) if n else 0.0
        if keep_history:
            history.append((x.copy(), cost, gn))
        if gn <= abstol or gn <= reltol * cost:
            termination = "grad_tol"
            break
        if it >= max_iter:
            break
        if time.process_time() - t0 > time_limit:
            termination = "time_limit"
            break
        it += 1
        # variables held at a bound by the gradient stay fixed; the step is solved over the rest
        free = ~(((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0)))
        Jf = Jm[:, free]
        A = np.vstack([Jf, np.sqrt(lam) * np.diag(dscale[free])]) if lam > 0 else Jf
        rhs = np.concatenate([-r, np.zeros(Jf.shape[1])]) if lam > 0 else -r
        delta = np.zeros(n)
        delta[free] = np.linalg.lstsq(A, rhs, rcond=None)[0]
        x_new = np.clip(x + delta, lo, hi)
        delta = x_new - x
        Jd = Jm @ delta
        pred = -(r @ Jd + 0.5 * Jd @ Jd)
        r_new = safe_res(x_new) if np.any(delta != 0) else r
        nfev += 1
        cost_new = 0.5 * r_new @ r_new if r_new is not None else np.inf
        rho = (cost - cost_new) / pred if pred > 0 else -np.inf
        if rho > 1e-4 and np.isfinite(cost_new):
            dx = np.linalg.norm(delta)
            df = cost - cost_new
            x, r, cost = x_new, r_new, cost_new
            Jm = np.asarray(jac(x), dtype=float)
            if not np.all(np.isfinite(Jm)):
                termination, msg = "numerical_failure", "Jacobian not finite"
                break
            dscale = np.maximum(dscale, np.linalg.norm(Jm, axis=0))
            lam *= max(1 / 3, 1 - (2 * rho - 1) ** 3)
            nu = 2.0
            if lam < 1e-12:
                lam = 0.0
            if dx <= abstol or dx <= reltol * np.linalg.norm(x):
                termination = "step_tol"
                break
            if df <= abstol or df <= reltol * cost:
                termination = "obj_tol"
                break
        else:
            if lam == 0.0:
                lam = 1e-3
            else:
                lam *= nu
                nu *= 2.0
            if lam > 1e16:
                dx = np.linalg.norm(delta)
                if dx <= abstol or dx <= reltol * np.linalg.norm(x):
                    termination = "step_tol"
                else:
                    termination, msg = "numerical_failure", "damping diverged"
                break
    g = Jm.T @ r
    pg = projected_gradient(x, g, lo, hi)
    if keep_history:
        history.append((x.copy(), cost, float(np.max(np.abs(pg)))))
    return SolveReport(x, cost, it, termination, float(np.max(np.abs(pg))) if n else 0.0, nfev, msg, history)

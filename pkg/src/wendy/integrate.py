"""Adaptive ODE integration on uniform grids, with forward sensitivities.

Non-stiff models use the Dormand-Prince 5(4) pair; models flagged stiff use
a four-stage L-stable Rosenbrock method (the "Ros4" coefficient set from
KPP).  Steps are shortened so that every grid point is hit exactly, so no
interpolation error enters the sampled trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .model import OdeModel

BLOWUP = 1e8
MAX_STEPS = 500_000

# Dormand-Prince 5(4)
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
]
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_DP_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

# Rosenbrock "Ros4" (L-stable, order 4, embedded order 3)
_R4_A = np.array([
    [0.0, 0.0, 0.0],
    [2.0, 0.0, 0.0],
    [1.867943637803922, 0.2344449711399156, 0.0],
    [1.867943637803922, 0.2344449711399156, 0.0],
])
_R4_C = np.array([
    [0.0, 0.0, 0.0],
    [-7.137615036412310, 0.0, 0.0],
    [2.580708087951457, 0.6515950076447975, 0.0],
    [-2.137148994382534, -0.3214669691237626, -0.6949742501781779],
])
_R4_M = np.array([2.255570073418735, 0.2870493262186792, 0.4353179431840180, 1.093502252409163])
_R4_E = np.array([-0.2815431932141155, -0.07276199124938920, -0.1082196201495311, -1.093502252409163])
_R4_ALPHA = np.array([0.0, 1.14564, 0.65521686381559, 0.65521686381559])
_R4_GAMMA = np.array([0.57282, -1.769193891319233, 0.7592633437920482, -0.1049021087100450])
_R4_NEWF = (True, True, True, False)


@dataclass
class Trajectory:
    """States sampled on ``t``.  ``status`` is ``ok``, ``blew_up`` or ``nan``.

    On failure the rows after the failure time are NaN.
    """

    t: np.ndarray
    U: np.ndarray
    status: str
    nfev: int = 0
    nsteps: int = 0
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def uniform_grid(T: float, M: int) -> np.ndarray:
    """``M + 1`` equispaced times on ``[0, T]``."""
    if M < 1 or not T > 0:
        raise ValueError(f"need M >= 1 and T > 0, got M={M}, T={T}")
    return np.linspace(0.0, float(T), int(M) + 1)


def _check_grid(grid):
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise ValueError("grid must be a 1-D array with at least two points")
    d = np.diff(grid)
    if np.any(d <= 0):
        raise ValueError("grid must be strictly increasing")
    if np.max(np.abs(d - d.mean())) > 1e-9 * max(1.0, abs(grid[-1])):
        raise ValueError("grid must be uniform")
    return grid


def _norm(err, y, ynew, rtol, atol):
    v = err / (atol + rtol * np.maximum(np.abs(y), np.abs(ynew)))
    return math.sqrt(v @ v / v.size)


def _initial_step(fun, t0, y0, f0, rtol, atol, span):
    sc = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / sc) ** 2))
    d1 = np.sqrt(np.mean((f0 / sc) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y0 + h0 * f0
    f1 = fun(t0 + h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / sc) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span)


class _Guard:
    """Watches the first ``D`` components of the state for NaN or blow-up."""

    def __init__(self, D, blowup):
        self.D = D
        self.blowup = blowup

    def __call__(self, y):
        u = y[: self.D]
        if not np.all(np.isfinite(u)):
            return "nan"
        if np.max(np.abs(u)) > self.blowup:
            return "blew_up"
        return None


def _march(step, fun, y0, grid, rtol, atol, guard, max_steps, order):
    """Generic adaptive driver.  ``step(t, y, f, h)`` returns (ynew, fnew, err_norm, nfev)."""
    Y = np.full((grid.size, y0.size), np.nan)
    Y[0] = y0
    status = guard(y0)
    if status is not None:
        return Y, status, 0, 0, "invalid initial state"
    t = grid[0]
    y = y0.copy()
    f = fun(t, y)
    nfev = 1
    if not np.all(np.isfinite(f)):
        return Y, "nan", nfev, 0, "non-finite derivative at initial state"
    span = grid[-1] - grid[0]
    h = _initial_step(fun, t, y, f, rtol, atol, span)
    nfev += 1
    k = 1
    nsteps = 0
    hmin_rel = 1e-14
    while k < grid.size:
        if nsteps >= max_steps:
            return Y, "blew_up", nfev, nsteps, "step budget exhausted"
        target = grid[k]
        clipped = False
        h_nat = h
        if t + h >= target - 1e-12 * max(1.0, abs(target)):
            h = target - t
            clipped = True
        ynew, fnew, err, nf = step(t, y, f, h)
        nfev += nf
        nsteps += 1
        if not np.isfinite(err):
            h *= 0.25
            if h < hmin_rel * max(1.0, abs(t)):
                bad = guard(ynew) or "nan"
                return Y, bad, nfev, nsteps, "non-finite step"
            continue
        if err <= 1.0:
            t = target if clipped else t + h
            y = ynew
            f = fnew
            bad = guard(y)
            if bad is not None:
                return Y, bad, nfev, nsteps, f"state left the finite range at t={t:.6g}"
            if clipped:
                Y[k] = y
                k += 1
            fac = 5.0 if err == 0 else min(5.0, 0.9 * err ** (-1.0 / order))
            h = h * fac
            if clipped:
                h = max(h, h_nat)
        else:
            h = h * max(0.2, 0.9 * err ** (-1.0 / order))
            if h < hmin_rel * max(1.0, abs(t)):
                return Y, "blew_up", nfev, nsteps, f"step size underflow at t={t:.6g}"
    return Y, "ok", nfev, nsteps, ""


def _dp5_stepper(fun, rtol, atol):
    def step(t, y, f, h):
        K = np.empty((7, y.size))
        K[0] = f
        for i in range(1, 6):
            K[i] = fun(t + _DP_C[i] * h, y + h * (_DP_A[i] @ K[:i]))
        ynew = y + h * (_DP_B @ K[:6])
        fnew = fun(t + h, ynew)
        K[6] = fnew
        if not (np.all(np.isfinite(ynew)) and np.all(np.isfinite(fnew))):
            return ynew, fnew, np.inf, 6
        err = _norm(h * (_DP_E @ K), y, ynew, rtol, atol)
        return ynew, fnew, err, 6

    return step


def _ros4_stepper(fun, jac, rtol, atol):
    n_stage = 4

    def step(t, y, f, h):
        n = y.size
        Jm = jac(t, y)
        dt = 1e-7 * max(1.0, abs(t))
        fdt = (fun(t + dt, y) - f) / dt
        nfev = 1
        G = np.eye(n) / (h * _R4_GAMMA[0]) - Jm
        if not np.all(np.isfinite(G)):
            return y, f, np.inf, nfev
        lu = lu_factor(G, check_finite=False)
        K = np.zeros((n_stage, n))
        F = f
        for i in range(n_stage):
            if i > 0 and _R4_NEWF[i]:
                yi = y + _R4_A[i, :i] @ K[:i]
                F = fun(t + _R4_ALPHA[i] * h, yi)
                nfev += 1
            rhs = F + (_R4_C[i, :i] / h) @ K[:i] + h * _R4_GAMMA[i] * fdt
            K[i] = lu_solve(lu, rhs, check_finite=False)
        ynew = y + _R4_M @ K
        err_vec = _R4_E @ K
        if not np.all(np.isfinite(ynew)):
            return ynew, f, np.inf, nfev
        fnew = fun(t + h, ynew)
        nfev += 1
        if not np.all(np.isfinite(fnew)):
            return ynew, fnew, np.inf, nfev
        return ynew, fnew, _norm(err_vec, y, ynew, rtol, atol), nfev

    return step


def _fd_jac(fun):
    def jac(t, y):
        f0 = fun(t, y)
        n = y.size
        out = np.empty((n, n))
        for j in range(n):
            h = 1e-7 * max(1.0, abs(y[j]))
            yp = y.copy()
            yp[j] += h
            out[:, j] = (fun(t, yp) - f0) / h
        return out

    return jac


def integrate(fun, y0, grid, *, jac=None, stiff=False, rtol=1e-10, atol=1e-10,
              D=None, blowup=BLOWUP, max_steps=MAX_STEPS):
    """Integrate ``y' = fun(t, y)`` and sample on ``grid``.

    Returns ``(Y, status, nfev, nsteps, message)``.  ``D`` limits the
    blow-up/NaN guard to the leading components (default: all).
    """
    grid = _check_grid(grid)
    y0 = np.asarray(y0, dtype=float).copy()
    guard = _Guard(y0.size if D is None else D, blowup)
    if stiff:
        stepper = _ros4_stepper(fun, jac if jac is not None else _fd_jac(fun), rtol, atol)
        order = 4
    else:
        stepper = _dp5_stepper(fun, rtol, atol)
        order = 5
    return _march(stepper, fun, y0, grid, rtol, atol, guard, max_steps, order)


def simulate(model: OdeModel, p, u0, grid, *, reltol: float = 1e-10, abstol: float = 1e-10,
             stiff: Optional[bool] = None, blowup: float = BLOWUP, max_steps: int = MAX_STEPS) -> Trajectory:
    """Solve the model from ``u0`` with parameters ``p`` and sample on ``grid``.

    ``stiff`` defaults to ``model.stiff``.  Trajectories that exceed
    ``blowup`` in absolute value, produce NaN, or run out of steps are
    returned with a non-``ok`` status instead of raising.
    """
    p = np.asarray(p, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    if u0.shape != (model.D,):
        raise ValueError(f"u0 must have shape ({model.D},), got {u0.shape}")
    if p.shape != (model.J,):
        raise ValueError(f"p must have shape ({model.J},), got {p.shape}")
    stiff = model.stiff if stiff is None else stiff
    grid = _check_grid(grid)

    rhs, jac_u = model.rhs, model.jac_u

    def fun(t, y):
        return np.asarray(rhs(p, y, t), dtype=float)

    def jac(t, y):
        return np.asarray(jac_u(p, y, t), dtype=float)

    with np.errstate(all="ignore"):
        Y, status, nfev, nsteps, msg = integrate(
            fun, u0, grid, jac=jac, stiff=stiff, rtol=reltol, atol=abstol,
            blowup=blowup, max_steps=max_steps)
    return Trajectory(grid, Y, status, nfev, nsteps, msg)


@dataclass
class Sensitivities:
    """Trajectory plus ``dU/dp`` (N, D, J) and ``dU/du0`` (N, D, D)."""

    traj: Trajectory
    dU_dp: np.ndarray
    dU_du0: np.ndarray


def simulate_sensitivities(model: OdeModel, p, u0, grid, *, reltol: float = 1e-8, abstol: float = 1e-8,
                           stiff: Optional[bool] = None, blowup: float = BLOWUP,
                           max_steps: int = MAX_STEPS) -> Sensitivities:
    """Forward sensitivities of the trajectory with respect to ``p`` and ``u0``.

    The variational equations ``S' = f_u S + f_p`` are integrated together
    with the state, and included in the error control.
    """
    p = np.asarray(p, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    D, J = model.D, model.J
    stiff = model.stiff if stiff is None else stiff
    grid = _check_grid(grid)
    W = J + D
    rhs, jac_u, jac_p = model.rhs, model.jac_u, model.jac_p

    # callbacks are evaluated on a single state, which any model accepts
    def fun(t, y):
        u = y[:D]
        S = y[D:].reshape(D, W)
        out = np.empty_like(y)
        out[:D] = rhs(p, u, t)
        dS = np.asarray(jac_u(p, u, t), dtype=float) @ S
        dS[:, :J] += jac_p(p, u, t)
        out[D:] = dS.ravel()
        return out

    y0 = np.zeros(D + D * W)
    y0[:D] = u0
    S0 = np.zeros((D, W))
    S0[:, J:] = np.eye(D)
    y0[D:] = S0.ravel()
    with np.errstate(all="ignore"):
        Y, status, nfev, nsteps, msg = integrate(
            fun, y0, grid, stiff=stiff, rtol=reltol, atol=abstol, D=D,
            blowup=blowup, max_steps=max_steps)
    S = Y[:, D:].reshape(-1, D, W)
    traj = Trajectory(grid, Y[:, :D].copy(), status, nfev, nsteps, msg)
    return Sensitivities(traj, S[:, :, :J].copy(), S[:, :, J:].copy())

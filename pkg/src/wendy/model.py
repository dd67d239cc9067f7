"""ODE model containers, derivative checking and the log-space transform.

A model is a right-hand side ``f(p, u, t)`` together with closed-form
callbacks for its first and second derivatives.  All callbacks broadcast
over leading axes: ``u`` may be a single state of shape ``(D,)`` or a
batch of shape ``(N, D)`` with ``t`` of shape ``(N,)``.

Callback output shapes for a batch of N states::

    rhs       (N, D)
    jac_u     (N, D, D)        [d, e]       = df_d / du_e
    jac_p     (N, D, J)        [d, j]       = df_d / dp_j
    jac_up    (N, D, D, J)     [d, e, j]    = d2f_d / du_e dp_j
    hess_pp   (N, D, J, J)     [d, i, j]    = d2f_d / dp_i dp_j
    hess_upp  (N, D, D, J, J)  [d, e, i, j] = d3f_d / du_e dp_i dp_j
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

Callback = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

CALLBACKS = ("rhs", "jac_u", "jac_p", "jac_up", "hess_pp", "hess_upp")


class DerivativeMismatch(ValueError):
    """A derivative callback disagrees with finite differences."""


@dataclass(frozen=True)
class OdeModel:
    """Right-hand side of ``du/dt = f(p, u, t)`` and its derivatives.

    Set ``vectorized=False`` if the callbacks only accept a single state;
    they are then looped over batches.  ``linear_in_params`` marks models
    whose right-hand side is affine in ``p``, which enables cheaper
    likelihood evaluation.  ``stiff`` selects the implicit integrator.
    """

    name: str
    D: int
    J: int
    rhs: Callback
    jac_u: Callback
    jac_p: Callback
    jac_up: Callback
    hess_pp: Callback
    hess_upp: Callback
    linear_in_params: bool = False
    stiff: bool = False
    vectorized: bool = True
    state_names: tuple = field(default=())

    def __post_init__(self):
        if int(self.D) < 1 or int(self.J) < 1:
            raise ValueError(f"model {self.name!r}: need D >= 1 and J >= 1, got D={self.D}, J={self.J}")
        for name in CALLBACKS:
            if not callable(getattr(self, name)):
                raise TypeError(f"model {self.name!r}: callback {name} is not callable")

    def batch(self, which: str, p, U, t) -> np.ndarray:
        """Evaluate callback ``which`` on a batch of states ``U`` (N, D) at times ``t`` (N,)."""
        fn = getattr(self, which)
        p = np.asarray(p, dtype=float)
        U = np.asarray(U, dtype=float)
        t = np.asarray(t, dtype=float)
        if self.vectorized:
            return np.asarray(fn(p, U, t), dtype=float)
        return np.stack([np.asarray(fn(p, U[m], t[m]), dtype=float) for m in range(U.shape[0])])


@dataclass(frozen=True)
class BenchmarkSystem:
    """A model plus the reference configuration used in the benchmarks.

    ``init_box`` is a ``(J, 2)`` array of ranges for random initial guesses.
    ``bounds`` (same shape) is only enforced when ``use_bounds`` is True.
    ``noise`` is either ``"additive"`` or ``"lognormal"``.
    """

    model: OdeModel
    u0: np.ndarray
    p_true: np.ndarray
    T: float
    init_box: np.ndarray
    noise: str = "additive"
    use_bounds: bool = False
    bounds: Optional[np.ndarray] = None

    @property
    def name(self) -> str:
        return self.model.name

    def active_bounds(self) -> Optional[np.ndarray]:
        if not self.use_bounds:
            return None
        return self.bounds if self.bounds is not None else self.init_box


def builtin(name: str, T: Optional[float] = None) -> BenchmarkSystem:
    """Return one of the built-in benchmark systems by name.

    ``T`` overrides the default time horizon (used for the Lorenz
    horizon sweeps, where T runs over 3, 6, ..., 30).
    """
    from .systems import SYSTEMS

    key = name.lower().replace("_", "-")
    if key not in SYSTEMS:
        raise KeyError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}")
    system = SYSTEMS[key]()
    if T is not None:
        if not T > 0:
            raise ValueError(f"time horizon must be positive, got {T}")
        system = replace(system, T=float(T))
    return system


def builtin_names() -> list:
    from .systems import SYSTEMS

    return sorted(SYSTEMS)


# ---------------------------------------------------------------------------
# finite-difference verification


def _fd(fn, x, h_rel=1e-6):
    """Central differences of ``fn`` w.r.t. the vector ``x``; new last axis."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        h = h_rel * (1.0 + abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        cols.append((np.asarray(fn(xp)) - np.asarray(fn(xm))) / (2 * h))
    return np.stack(cols, axis=-1)


def _rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(1.0, float(np.max(np.abs(b), initial=0.0)))
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


def verify_derivatives(model: OdeModel, p_samples, u_samples, t_samples, rtol: float = 1e-5) -> dict:
    """Compare every derivative callback against central differences.

    Each sample triple ``(p, u, t)`` is checked separately.  Errors are
    measured as ``max|analytic - fd| / max(1, max|fd|)``.  Returns the worst
    error per callback, or raises :class:`DerivativeMismatch` naming the
    offending callback and sample index if any error exceeds ``rtol``.
    """
    p_samples = np.atleast_2d(np.asarray(p_samples, dtype=float))
    u_samples = np.atleast_2d(np.asarray(u_samples, dtype=float))
    t_samples = np.atleast_1d(np.asarray(t_samples, dtype=float))
    n = p_samples.shape[0]
    if u_samples.shape[0] != n or t_samples.shape[0] != n:
        raise ValueError("p_samples, u_samples and t_samples need the same number of rows")

    worst = {name: 0.0 for name in CALLBACKS[1:]}
    for s in range(n):
        p, u, t = p_samples[s], u_samples[s], t_samples[s:s + 1]

        def ev(which, pp, uu):
            return model.batch(which, pp, uu[None, :], t)[0]

        checks = {
            "jac_u": (ev("jac_u", p, u), _fd(lambda uu: ev("rhs", p, uu), u)),
            "jac_p": (ev("jac_p", p, u), _fd(lambda pp: ev("rhs", pp, u), p)),
            "jac_up": (ev("jac_up", p, u), _fd(lambda pp: ev("jac_u", pp, u), p)),
            "hess_pp": (ev("hess_pp", p, u), _fd(lambda pp: ev("jac_p", pp, u), p)),
            "hess_upp": (ev("hess_upp", p, u), _fd(lambda pp: ev("jac_up", pp, u), p)),
        }
        for name, (exact, approx) in checks.items():
            err = _rel_err(exact, approx)
            worst[name] = max(worst[name], err)
            if not np.isfinite(err) or err > rtol:
                raise DerivativeMismatch(
                    f"model {model.name!r}: callback {name} deviates from finite differences "
                    f"by {err:.3e} (rtol {rtol:.1e}) at sample {s}"
                )
    return worst


# ---------------------------------------------------------------------------
# log-space transform


def log_transform(model: OdeModel) -> OdeModel:
    """Model for ``x = log u``: ``dx/dt = f(p, exp(x), t) / exp(x)``.

    Derivatives are taken with respect to ``x``.  The result can be fed to
    the additive-noise pipeline with log-transformed data.
    """

    def parts(p, x, t):
        u = np.exp(x)
        return u, 1.0 / u

    def rhs(p, x, t):
        u, iu = parts(p, x, t)
        return model.rhs(p, u, t) * iu

    def jac_u(p, x, t):
        u, iu = parts(p, x, t)
        f = model.rhs(p, u, t)
        Jx = model.jac_u(p, u, t) * u[..., None, :] * iu[..., :, None]
        Jx = Jx - _diag(f * iu)
        return Jx

    def jac_p(p, x, t):
        u, iu = parts(p, x, t)
        return model.jac_p(p, u, t) * iu[..., :, None]

    def jac_up(p, x, t):
        u, iu = parts(p, x, t)
        A = model.jac_up(p, u, t) * u[..., None, :, None] * iu[..., :, None, None]
        Jp = model.jac_p(p, u, t) * iu[..., :, None]
        D = u.shape[-1]
        idx = np.arange(D)
        A[..., idx, idx, :] -= Jp
        return A

    def hess_pp(p, x, t):
        u, iu = parts(p, x, t)
        return model.hess_pp(p, u, t) * iu[..., :, None, None]

    def hess_upp(p, x, t):
        u, iu = parts(p, x, t)
        A = model.hess_upp(p, u, t) * u[..., None, :, None, None] * iu[..., :, None, None, None]
        Hp = model.hess_pp(p, u, t) * iu[..., :, None, None]
        D = u.shape[-1]
        idx = np.arange(D)
        A[..., idx, idx, :, :] -= Hp
        return A

    if not model.vectorized:
        raise ValueError("log_transform needs a vectorized model")
    return OdeModel(
        name=f"log-{model.name}",
        D=model.D,
        J=model.J,
        rhs=rhs,
        jac_u=jac_u,
        jac_p=jac_p,
        jac_up=jac_up,
        hess_pp=hess_pp,
        hess_upp=hess_upp,
        linear_in_params=model.linear_in_params,
        stiff=model.stiff,
        vectorized=True,
        state_names=model.state_names,
    )


def _diag(v):
    """Batched diagonal matrix from the last axis of ``v``."""
    D = v.shape[-1]
    out = np.zeros(v.shape + (D,))
    idx = np.arange(D)
    out[..., idx, idx] = v
    return out

"""Weak-form residual, its parameter derivatives and covariance.

Vectorization is column-major in the state: entry ``d * K + k`` of ``g``
belongs to state ``d`` and test function ``k``, and entry ``e * (M + 1) + m``
of the data vector to state ``e`` at time ``m``.

With ``F = f(p, U, t)`` the residual is ``r = g - b`` where ``g = vec(Phi F)``
and ``b = -vec(PhiDot U)``.  Linearizing ``r`` in the data gives
``L = grad_u g + (I_D kron PhiDot)`` and the residual covariance
``S = L (Sigma kron I) L^T`` with ``Sigma = diag(sigma2)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cholesky

from .model import OdeModel, log_transform
from .testfn import TestFunctionBasis, build_basis

JITTER_START = 1e-12
JITTER_MAX = 1e-6
_CHUNK_BYTES = 256 * 2**20


class NumericalFailure(RuntimeError):
    """A linear-algebra step failed (e.g. the covariance is not positive definite)."""


def estimate_noise_variance(U) -> np.ndarray:
    """Per-state noise variance from second differences: mean((w[m-1] - 2 w[m] + w[m+1])^2) / 6."""
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    if U.shape[0] < 3:
        raise ValueError("need at least 3 samples to estimate the noise level")
    d2 = U[:-2] - 2 * U[1:-1] + U[2:]
    return np.mean(d2**2, axis=0) / 6.0


def log_data(U) -> np.ndarray:
    """Logarithm of positive data for the lognormal pipeline.

    Test functions vanish at the first and last grid points, so nonpositive
    values there are replaced by the neighbouring row before taking logs.
    Nonpositive interior values raise ``ValueError``.
    """
    U = np.array(U, dtype=float)
    for row, nb in ((0, 1), (-1, -2)):
        bad = ~(U[row] > 0)
        U[row, bad] = U[nb, bad]
    if not np.all(U > 0):
        idx = np.argwhere(~(U > 0))[0]
        raise ValueError(
            f"lognormal noise needs positive data; found {U[tuple(idx)]!r} at row {idx[0]}, state {idx[1]}")
    return np.log(U)


@dataclass
class WeakProblem:
    """Everything needed to evaluate the weak-form residual at any ``p``.

    ``model`` acts on the working variables (the log-transformed model for
    lognormal noise) and ``X`` holds the working data.  ``sigma2`` are
    the per-state noise variances in the working variables.
    """

    model: OdeModel
    X: np.ndarray
    grid: np.ndarray
    basis: TestFunctionBasis
    sigma2: np.ndarray
    noise: str = "additive"
    source_model: Optional[OdeModel] = None

    @property
    def D(self) -> int:
        return self.model.D

    @property
    def J(self) -> int:
        return self.model.J

    @property
    def K(self) -> int:
        return self.basis.K

    @property
    def n(self) -> int:
        return self.K * self.D

    @property
    def b(self) -> np.ndarray:
        return -(self.basis.PhiDot @ self.X).T.ravel()


def build_problem(model: OdeModel, U, grid, *, noise: str = "additive", sigma2=None,
                  basis: Optional[TestFunctionBasis] = None, radii=None) -> WeakProblem:
    """Set up a weak-form problem from raw data ``U`` ((M + 1) x D).

    For ``noise="lognormal"`` the data are log-transformed and the model is
    replaced by its log-space version.  ``sigma2`` (per-state variance in
    the working variables) defaults to the second-difference estimate.
    """
    grid = np.asarray(grid, dtype=float)
    U = np.asarray(U, dtype=float)
    if U.ndim != 2 or U.shape[1] != model.D:
        raise ValueError(f"data must have shape (M+1, {model.D}), got {U.shape}")
    if U.shape[0] != grid.size:
        raise ValueError(f"data has {U.shape[0]} rows but the grid has {grid.size} points")
    if noise == "additive":
        X, work = U.copy(), model
        if not np.all(np.isfinite(X)):
            raise ValueError("data contain non-finite values")
    elif noise == "lognormal":
        X, work = log_data(U), log_transform(model)
    else:
        raise ValueError(f"noise must be 'additive' or 'lognormal', got {noise!r}")
    if basis is None:
        basis = build_basis(X, grid, radii=radii)
    if sigma2 is None:
        sigma2 = estimate_noise_variance(X)
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (model.D,)).copy()
    if np.any(sigma2 < 0) or not np.all(np.isfinite(sigma2)):
        raise ValueError("noise variances must be finite and nonnegative")
    return WeakProblem(work, X, grid, basis, sigma2, noise, model)


# ---------------------------------------------------------------------------
# model evaluations on the grid


@dataclass
class GridEval:
    """Model callbacks evaluated at every grid point for one parameter vector."""

    p: np.ndarray
    F: np.ndarray            # (N, D)
    Jf: np.ndarray           # (N, D, D)
    Jp: np.ndarray           # (N, D, J)
    Jup: np.ndarray          # (N, D, D, J)
    Hpp: Optional[np.ndarray] = None   # (N, D, J, J)
    Hupp: Optional[np.ndarray] = None  # (N, D, D, J, J)


def evaluate_grid(problem: WeakProblem, p, second: bool = False) -> GridEval:
    m = problem.model
    p = np.asarray(p, dtype=float)
    X, t = problem.X, problem.grid
    with np.errstate(all="ignore"):
        ev = GridEval(p, m.batch("rhs", p, X, t), m.batch("jac_u", p, X, t),
                      m.batch("jac_p", p, X, t), m.batch("jac_up", p, X, t))
        if second:
            ev.Hpp = m.batch("hess_pp", p, X, t)
            ev.Hupp = m.batch("hess_upp", p, X, t)
    return ev


def _vec(A):
    """vec of a (K, D) block-per-state matrix: state-major stacking."""
    return A.T.ravel()


def residual(problem: WeakProblem, p, ev: Optional[GridEval] = None) -> np.ndarray:
    """``r(p) = g(p) - b``."""
    ev = ev if ev is not None else evaluate_grid(problem, p)
    return _vec(problem.basis.Phi @ ev.F) - problem.b


def grad_g(problem: WeakProblem, p, ev: Optional[GridEval] = None) -> np.ndarray:
    """Jacobian of ``g`` with respect to ``p``, shape (K D, J)."""
    ev = ev if ev is not None else evaluate_grid(problem, p)
    G = np.einsum("km,mdj->dkj", problem.basis.Phi, ev.Jp)
    return G.reshape(problem.n, problem.J)


def hess_g(problem: WeakProblem, p, ev: Optional[GridEval] = None) -> np.ndarray:
    """Second derivatives of ``g``, shape (K D, J, J)."""
    if ev is None or ev.Hpp is None:
        ev = evaluate_grid(problem, p, second=True)
    H = np.einsum("km,mdij->dkij", problem.basis.Phi, ev.Hpp)
    return H.reshape(problem.n, problem.J, problem.J)


# ---------------------------------------------------------------------------
# covariance blocks


def _sandwich(A, w, B):
    """``out[q] = A diag(w[:, q]) B^T`` for every column q of ``w`` (N, Q)."""
    K, N = A.shape
    Q = w.shape[1]
    out = np.empty((Q, K, B.shape[0]))
    step = max(1, int(_CHUNK_BYTES // (8 * K * N)))
    for q0 in range(0, Q, step):
        q1 = min(Q, q0 + step)
        X = A[None, :, :] * w[:, q0:q1].T[:, None, :]
        out[q0:q1] = (X.reshape(-1, N) @ B.T).reshape(q1 - q0, K, B.shape[0])
    return out


def cross_blocks(basis: TestFunctionBasis, sigma2, Ja, Jb, dot_a: bool, dot_b: bool) -> np.ndarray:
    """Blocks of ``E_a Sigma E_b^T`` for operators of the form used in ``L``.

    ``E = (I kron Phi) blockdiag_m(Jx[m]) + [has_dot] (I kron PhiDot)``, with
    ``Ja`` and ``Jb`` of shape (Q, N, D, D) (a batch of Q pairs).  Returns
    an array of shape (Q, D, D, K, K) with block ``[d, d']``.
    """
    Phi, Pd = basis.Phi, basis.PhiDot
    Q, N, D, _ = Ja.shape
    K = Phi.shape[0]
    s = np.asarray(sigma2, dtype=float)
    c = np.einsum("qmde,e,qmfe->mqdf", Ja, s, Jb).reshape(N, Q * D * D)
    out = _sandwich(Phi, c, Phi).reshape(Q, D, D, K, K)
    if dot_b:
        w = (Ja * s[None, None, None, :]).transpose(1, 0, 2, 3).reshape(N, Q * D * D)
        out += _sandwich(Phi, w, Pd).reshape(Q, D, D, K, K)
    if dot_a:
        # block [d, d'] = PhiDot diag(s_d Jb[m, d', d]) Phi^T
        w = (Jb * s[None, None, None, :]).transpose(1, 0, 2, 3).reshape(N, Q * D * D)
        tmp = _sandwich(Phi, w, Pd).reshape(Q, D, D, K, K)
        out += tmp.transpose(0, 1, 2, 4, 3).transpose(0, 2, 1, 3, 4)
    if dot_a and dot_b:
        PP = Pd @ Pd.T
        for d in range(D):
            out[:, d, d] += s[d] * PP
    return out


def assemble(blocks) -> np.ndarray:
    """(..., D, D, K, K) blocks to (..., D K, D K) matrices."""
    *lead, D, _, K, _ = blocks.shape
    return np.swapaxes(blocks, -3, -2).reshape(*lead, D * K, D * K)


def transpose_blocks(blocks) -> np.ndarray:
    """Blocks of the transposed matrix."""
    return np.swapaxes(np.swapaxes(blocks, -4, -3), -2, -1)


def covariance(problem: WeakProblem, p, ev: Optional[GridEval] = None) -> np.ndarray:
    """Residual covariance ``S(p)``, shape (K D, K D)."""
    ev = ev if ev is not None else evaluate_grid(problem, p)
    Jf = ev.Jf[None]
    S = assemble(cross_blocks(problem.basis, problem.sigma2, Jf, Jf, True, True)[0])
    return 0.5 * (S + S.T)


def covariance_derivatives(problem: WeakProblem, p, ev: Optional[GridEval] = None,
                           second: bool = False):
    """``dS/dp_j`` for all j, shape (J, n, n); with ``second=True`` also (J, J, n, n).

    The second derivative uses the full product rule
    ``d_ij L Sig L^T + d_j L Sig d_i L^T + d_i L Sig d_j L^T + L Sig d_ij L^T``.
    Intended for testing and small problems; the likelihood code never forms
    the second derivatives explicitly.
    """
    if ev is None or (second and ev.Hupp is None):
        ev = evaluate_grid(problem, p, second=second)
    J = problem.J
    Jup = np.moveaxis(ev.Jup, -1, 0)                       # (J, N, D, D)
    Jf = np.broadcast_to(ev.Jf, Jup.shape)
    X = cross_blocks(problem.basis, problem.sigma2, Jup, Jf, False, True)
    dS = assemble(X + transpose_blocks(X))
    if not second:
        return dS
    n = problem.n
    d2S = np.empty((J, J, n, n))
    Hupp = np.moveaxis(ev.Hupp, (-2, -1), (0, 1))          # (J, J, N, D, D)
    for i in range(J):
        Hi = Hupp[i]
        A = cross_blocks(problem.basis, problem.sigma2, Hi, np.broadcast_to(ev.Jf, Hi.shape), False, True)
        B = cross_blocks(problem.basis, problem.sigma2, np.broadcast_to(Jup[i], Jup.shape), Jup, False, False)
        d2S[i] = assemble(A + transpose_blocks(A) + B + transpose_blocks(B))
    return dS, d2S


def cholesky_jitter(S, jitter_start=JITTER_START, jitter_max=JITTER_MAX):
    """Lower Cholesky factor of ``S``, adding relative diagonal jitter on failure.

    Tries ``S`` as is, then ``S + eps * (tr S / n) I`` for eps from
    ``jitter_start`` up by factors of 10 to ``jitter_max``.  Returns
    ``(L, eps_used)`` or raises :class:`NumericalFailure`.
    """
    n = S.shape[0]
    if not np.all(np.isfinite(S)):
        raise NumericalFailure("covariance has non-finite entries")
    scale = np.trace(S) / n
    eps = 0.0
    while True:
        try:
            A = S if eps == 0.0 else S + (eps * scale) * np.eye(n)
            return cholesky(A, lower=True, check_finite=False), eps
        except np.linalg.LinAlgError:
            pass
        eps = jitter_start if eps == 0.0 else eps * 10
        if eps > jitter_max * (1 + 1e-9) or not scale > 0:
            raise NumericalFailure(
                f"covariance is not positive definite even with jitter {jitter_max:g} x mean diagonal")


# ---------------------------------------------------------------------------
# fast path for models affine in the parameters


class AffineCache:
    """Precomputed pieces for a model whose right-hand side is affine in ``p``.

    With ``L(p) = E_0 + sum_j p_j E_j`` the covariance is a quadratic form
    ``S(p) = sum_ab q_a q_b E_a Sigma E_b^T`` with ``q = [1, p]``; the pair
    matrices are computed once.  Likewise ``g(p) = g_0 + G p``.
    """

    def __init__(self, problem: WeakProblem):
        if not problem.model.linear_in_params:
            raise ValueError("AffineCache needs a model flagged linear_in_params")
        J = problem.J
        zero = np.zeros(J)
        ev = evaluate_grid(problem, zero)
        self.G = grad_g(problem, zero, ev)
        self.g0 = _vec(problem.basis.Phi @ ev.F)
        self.b = problem.b
        E = np.concatenate([ev.Jf[None], np.moveaxis(ev.Jup, -1, 0)], axis=0)  # (J+1, N, D, D)
        pairs = [(a, c) for a in range(J + 1) for c in range(a, J + 1)]
        self.pairs = pairs
        ia = np.array([a for a, _ in pairs])
        ic = np.array([c for _, c in pairs])
        n = problem.n
        self.C = np.empty((len(pairs), n, n))
        step = max(1, J + 1)
        for s0 in range(0, len(pairs), step):
            s1 = min(len(pairs), s0 + step)
            a, c = ia[s0:s1], ic[s0:s1]
            blk = cross_blocks(problem.basis, problem.sigma2, E[a], E[c], False, False)
            # the PhiDot part belongs to E_0 only
            for q in range(s1 - s0):
                if a[q] == 0 or c[q] == 0:
                    one = cross_blocks(problem.basis, problem.sigma2, E[a[q]][None], E[c[q]][None],
                                       a[q] == 0, c[q] == 0)[0]
                    blk[q] = one
            M = assemble(blk)
            sym = (a != c)
            M[sym] = M[sym] + np.swapaxes(M[sym], -1, -2)
            self.C[s0:s1] = M
        self.ia, self.ic = ia, ic
        self.J = J

    @staticmethod
    def nbytes(problem: WeakProblem) -> int:
        J = problem.J
        return (J + 1) * (J + 2) // 2 * problem.n**2 * 8

    def weights(self, p):
        q = np.concatenate([[1.0], np.asarray(p, dtype=float)])
        return q[self.ia] * q[self.ic]

    def weight_grads(self, p):
        """d(weights)/dp_j, shape (J, P)."""
        q = np.concatenate([[1.0], np.asarray(p, dtype=float)])
        W = np.zeros((self.J, len(self.pairs)))
        for j in range(self.J):
            W[j] = (self.ia == j + 1) * q[self.ic] + (self.ic == j + 1) * q[self.ia]
        return W

    def S(self, p):
        S = np.tensordot(self.weights(p), self.C, axes=1)
        return 0.5 * (S + S.T)

    def dS(self, p):
        return np.tensordot(self.weight_grads(p), self.C, axes=1)

    def d2S_pair(self, i, j):
        """Constant second derivative of S w.r.t. p_i, p_j."""
        a, c = min(i, j) + 1, max(i, j) + 1
        k = self.pairs.index((a, c))
        return self.C[k] * (2.0 if a == c else 1.0)

    def residual(self, p):
        return self.g0 + self.G @ np.asarray(p, dtype=float) - self.b

"""Weak-form negative log-likelihood with analytic gradient and Hessian.

The objective (up to additive constants) is

    l(p) = log det S(p) + r(p)^T S(p)^{-1} r(p)

Its gradient is ``Tr(S^-1 S_j) + 2 g_j^T w - w^T S_j w`` with ``w = S^-1 r``,
and its Hessian

    -Tr(S^-1 S_i S^-1 S_j) + Tr(S^-1 S_ij) + 2 g_ij^T w + 2 g_i^T S^-1 g_j
    - 2 g_j^T S^-1 S_i w - 2 g_i^T S^-1 S_j w + 2 w^T S_i S^-1 S_j w - w^T S_ij w

where subscripts denote parameter derivatives.  Second derivatives of
``S`` never get formed; the terms that need them reduce to sums over
grid points.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .weakform import (
    AffineCache,
    NumericalFailure,
    WeakProblem,
    assemble,
    cholesky_jitter,
    covariance,
    cross_blocks,
    evaluate_grid,
    grad_g,
    hess_g,
    residual,
    transpose_blocks,
)

AFFINE_CACHE_LIMIT = 768 * 2**20


class WeakLikelihood:
    """Evaluates ``l``, its gradient and Hessian at arbitrary ``p``.

    The last evaluation is cached, so calling ``value``, ``gradient`` and
    ``hessian`` at the same point shares the factorization.  Models flagged
    as affine in ``p`` use precomputed quadratic pieces when they fit in
    ``cache_limit`` bytes.
    """

    def __init__(self, problem: WeakProblem, use_affine: Optional[bool] = None,
                 cache_limit: int = AFFINE_CACHE_LIMIT):
        self.problem = problem
        if use_affine is None:
            use_affine = problem.model.linear_in_params and AffineCache.nbytes(problem) <= cache_limit
        self.affine = AffineCache(problem) if use_affine else None
        self._key = None
        self._state = None
        self.nevals = 0

    # -- core -------------------------------------------------------------

    def _base(self, p):
        """Factorize S at p; returns dict with r, S, chol, w, logdet, mahal."""
        p = np.asarray(p, dtype=float)
        key = p.tobytes()
        if self._key == key:
            return self._state
        self.nevals += 1
        pr = self.problem
        st = {"p": p.copy()}
        if self.affine is not None:
            r = self.affine.residual(p)
            S = self.affine.S(p)
            ev = None
        else:
            ev = evaluate_grid(pr, p)
            r = residual(pr, p, ev)
            S = covariance(pr, p, ev) if np.all(np.isfinite(ev.Jf)) else np.full((pr.n, pr.n), np.nan)
        st.update(ev=ev, r=r, S=S)
        if not np.all(np.isfinite(r)):
            raise NumericalFailure("weak residual is not finite at this parameter")
        Lc, eps = cholesky_jitter(S)
        z = solve_triangular(Lc, r, lower=True, check_finite=False)
        st.update(chol=Lc, jitter=eps, z=z,
                  w=solve_triangular(Lc.T, z, lower=False, check_finite=False),
                  logdet=2.0 * np.sum(np.log(np.diag(Lc))),
                  mahal=float(z @ z))
        self._key, self._state = key, st
        return st

    def value(self, p) -> float:
        st = self._base(p)
        return float(st["logdet"] + st["mahal"])

    def safe_value(self, p) -> float:
        """Like :meth:`value` but returns +inf where the covariance cannot be factorized."""
        try:
            v = self.value(p)
        except NumericalFailure:
            return np.inf
        return v if np.isfinite(v) else np.inf

    def whitened_residual(self, p) -> np.ndarray:
        """``L^-1 r`` with ``S = L L^T``; standard normal at the true parameters to first order."""
        return self._base(p)["z"].copy()

    def parts(self, p):
        st = self._base(p)
        return st["logdet"], st["mahal"]

    # -- derivatives ------------------------------------------------------

    def _ensure_inverse(self, st):
        if "Sinv" not in st:
            n = st["S"].shape[0]
            Sinv = cho_solve((st["chol"], True), np.eye(n), check_finite=False)
            st["Sinv"] = 0.5 * (Sinv + Sinv.T)
        return st["Sinv"]

    def _ensure_ev(self, st, second=False):
        ev = st["ev"]
        if ev is None or (second and ev.Hupp is None):
            ev = evaluate_grid(self.problem, st["p"], second=second)
            st["ev"] = ev
        return ev

    def _diag_blocks(self, st):
        """H_pp[d, d', m] = (Phi^T Sinv_dd' Phi)[m, m] and H_pd likewise with PhiDot."""
        if "Hpp_diag" not in st:
            pr = self.problem
            Phi, Pd = pr.basis.Phi, pr.basis.PhiDot
            D, K = pr.D, pr.K
            Sinv = self._ensure_inverse(st).reshape(D, K, D, K)
            Z = (Sinv.reshape(D * K * D, K) @ Phi).reshape(D, K, D, -1)
            st["Hpp_diag"] = np.einsum("km,dkfm->dfm", Phi, Z)
            Z = (Sinv.reshape(D * K * D, K) @ Pd).reshape(D, K, D, -1)
            st["Hpd_diag"] = np.einsum("km,dkfm->dfm", Phi, Z)
        return st["Hpp_diag"], st["Hpd_diag"]

    def _avecs(self, st, ev):
        """a[m, e] = (L^T w) and aj[m, e, j] = (d_j L^T w)."""
        if "a" not in st:
            pr = self.problem
            Wm = st["w"].reshape(pr.D, pr.K).T                     # (K, D)
            pw = pr.basis.Phi.T @ Wm                               # (N, D)
            st["pw"] = pw
            st["a"] = np.einsum("md,mde->me", pw, ev.Jf) + pr.basis.PhiDot.T @ Wm
            st["aj"] = np.einsum("md,mdej->mej", pw, ev.Jup)
        return st["a"], st["aj"]

    def gradient(self, p) -> np.ndarray:
        st = self._base(p)
        if "grad" in st:
            return st["grad"].copy()
        pr = self.problem
        w = st["w"]
        if self.affine is not None:
            G = self.affine.G
            dS = self.affine.dS(p)
            Sinv = self._ensure_inverse(st)
            tr = np.einsum("ab,jab->j", Sinv, dS)
            quad = np.einsum("a,jab,b->j", w, dS, w)
        else:
            ev = self._ensure_ev(st)
            G = grad_g(pr, p, ev)
            tr = self._trace_dS(st, ev)
            a, aj = self._avecs(st, ev)
            quad = 2.0 * np.einsum("e,mej,me->j", pr.sigma2, aj, a)
        grad = tr + 2.0 * G.T @ w - quad
        st["grad"] = grad
        return grad.copy()

    def _trace_dS(self, st, ev):
        """Tr(S^-1 dS_j) = 2 Tr(S^-1 d_j L Sig L^T), summed over grid points."""
        Qb = self._qb(st, ev)
        return 2.0 * np.einsum("mdej,mde->j", ev.Jup, Qb)

    def _qb(self, st, ev):
        """Qb[m, d, e] = sum_k (S^-1 L Sig)[(d,k), (e,m)] Phi[k, m]."""
        if "Qb" not in st:
            Hpp, Hpd = self._diag_blocks(st)
            s = self.problem.sigma2
            st["Qb"] = (np.einsum("dfm,mfe->mde", Hpp, ev.Jf) + np.transpose(Hpd, (2, 0, 1))) * s[None, None, :]
        return st["Qb"]

    def hessian(self, p) -> np.ndarray:
        st = self._base(p)
        if "hess" in st:
            return st["hess"].copy()
        pr = self.problem
        J = pr.J
        w = st["w"]
        Sinv = self._ensure_inverse(st)
        if self.affine is not None:
            G = self.affine.G
            Gij_w = np.zeros((J, J))
            dS = self.affine.dS(p)
            T2 = np.empty((J, J))
            for i in range(J):
                for j in range(i, J):
                    d2 = self.affine.d2S_pair(i, j)
                    T2[i, j] = T2[j, i] = np.vdot(Sinv, d2)
            quad2 = np.empty((J, J))
            for i in range(J):
                for j in range(i, J):
                    quad2[i, j] = quad2[j, i] = w @ (self.affine.d2S_pair(i, j) @ w)
        else:
            ev = self._ensure_ev(st, second=True)
            G = grad_g(pr, p, ev)
            Gij_w = np.einsum("aij,a->ij", hess_g(pr, p, ev), w)
            Jup = np.moveaxis(ev.Jup, -1, 0)
            Jf = np.broadcast_to(ev.Jf, Jup.shape)
            X = cross_blocks(pr.basis, pr.sigma2, Jup, Jf, False, True)
            dS = assemble(X + transpose_blocks(X))
            del X
            s = pr.sigma2
            Hpp, _ = self._diag_blocks(st)
            Qb = self._qb(st, ev)
            t_a = np.einsum("mdeij,mde->ij", ev.Hupp, Qb)
            t_b = np.einsum("e,mdei,mfej,fdm->ij", s, ev.Jup, ev.Jup, Hpp)
            T2 = 2.0 * (t_a + t_b)
            T2 = 0.5 * (T2 + T2.T)
            a, aj = self._avecs(st, ev)
            aij = np.einsum("md,mdeij->meij", st["pw"], ev.Hupp)
            quad2 = 2.0 * (np.einsum("e,meij,me->ij", s, aij, a) + np.einsum("e,mei,mej->ij", s, aj, aj))
        Y = Sinv[None] @ dS                                      # S^-1 S_j
        T1 = Y.reshape(J, -1) @ np.swapaxes(Y, 1, 2).reshape(J, -1).T
        sv = dS @ w                                              # S_j w, (J, n)
        SinvG = Sinv @ G
        SinvS = sv @ Sinv                                        # (S^-1 S_j w)^T
        H = (-T1 + T2 + 2.0 * Gij_w + 2.0 * G.T @ SinvG
             - 2.0 * (SinvG.T @ sv.T) - 2.0 * (SinvG.T @ sv.T).T
             + 2.0 * sv @ SinvS.T - quad2)
        H = 0.5 * (H + H.T)
        st["hess"] = H
        if "grad" not in st:
            tr = np.trace(Y, axis1=1, axis2=2)
            quad = sv @ w
            st["grad"] = tr + 2.0 * G.T @ w - quad
        return H.copy()


def nll(problem: WeakProblem, p) -> float:
    """Negative log-likelihood (up to constants) at ``p``."""
    return WeakLikelihood(problem, use_affine=False).value(p)


def nll_gradient(problem: WeakProblem, p) -> np.ndarray:
    return WeakLikelihood(problem, use_affine=False).gradient(p)


def nll_hessian(problem: WeakProblem, p) -> np.ndarray:
    return WeakLikelihood(problem, use_affine=False).hessian(p)


def whitened_residual(problem: WeakProblem, p) -> np.ndarray:
    return WeakLikelihood(problem, use_affine=False).whitened_residual(p)


def estimator_covariance(problem: WeakProblem, p, rcond: float = 1e-10) -> np.ndarray:
    """Asymptotic covariance ``G^+ S G^+T`` of the estimate, with ``G = dg/dp``.

    Raises ``NumericalFailure`` naming the poorly determined parameter
    directions if ``G`` is rank deficient.
    """
    ev = evaluate_grid(problem, p)
    G = grad_g(problem, p, ev)
    S = covariance(problem, p, ev)
    U, sv, Vt = np.linalg.svd(G, full_matrices=False)
    if sv.size == 0 or not np.all(np.isfinite(sv)):
        raise NumericalFailure("weak-form Jacobian is not finite")
    bad = sv <= rcond * sv[0]
    if np.any(bad):
        dirs = "; ".join(np.array2string(v, precision=3) for v in Vt[bad])
        raise NumericalFailure(f"weak-form Jacobian is rank deficient; unidentifiable directions: {dirs}")
    Gp = (Vt.T / sv) @ U.T
    C = Gp @ S @ Gp.T
    return 0.5 * (C + C.T)

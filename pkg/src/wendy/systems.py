"""Built-in benchmark systems with hand-derived derivatives."""

import numpy as np

from .model import BenchmarkSystem, OdeModel


def _zeros(u, *shape):
    return np.zeros(u.shape[:-1] + shape)


def _split(u):
    if u.ndim == 1:
        return list(u)
    return [u[..., d] for d in range(u.shape[-1])]


def _stack(u, parts):
    # a single state (the integrator's case) is cheaper to assemble directly
    if u.ndim == 1:
        return np.array(parts, dtype=float)
    return np.stack(np.broadcast_arrays(*parts), axis=-1)


# ---------------------------------------------------------------------------
# Lorenz


def _lorenz_rhs(p, u, t):
    x, y, z = _split(u)
    return _stack(u, [p[0] * (y - x), x * (p[1] - z) - y, x * y - p[2] * z])


def _lorenz_jac_u(p, u, t):
    x, y, z = _split(u)
    J = _zeros(u, 3, 3)
    J[..., 0, 0] = -p[0]
    J[..., 0, 1] = p[0]
    J[..., 1, 0] = p[1] - z
    J[..., 1, 1] = -1.0
    J[..., 1, 2] = -x
    J[..., 2, 0] = y
    J[..., 2, 1] = x
    J[..., 2, 2] = -p[2]
    return J


def _lorenz_jac_p(p, u, t):
    x, y, z = _split(u)
    J = _zeros(u, 3, 3)
    J[..., 0, 0] = y - x
    J[..., 1, 1] = x
    J[..., 2, 2] = -z
    return J


def _lorenz_jac_up(p, u, t):
    A = _zeros(u, 3, 3, 3)
    A[..., 0, 0, 0] = -1.0
    A[..., 0, 1, 0] = 1.0
    A[..., 1, 0, 1] = 1.0
    A[..., 2, 2, 2] = -1.0
    return A


def lorenz():
    model = OdeModel(
        "lorenz", 3, 3, _lorenz_rhs, _lorenz_jac_u, _lorenz_jac_p, _lorenz_jac_up,
        lambda p, u, t: _zeros(u, 3, 3, 3), lambda p, u, t: _zeros(u, 3, 3, 3, 3),
        linear_in_params=True,
    )
    return BenchmarkSystem(
        model=model,
        u0=np.array([2.0, 1.0, 1.0]),
        p_true=np.array([10.0, 28.0, 8.0 / 3.0]),
        T=30.0,
        init_box=np.array([[0.0, 20.0], [0.0, 35.0], [0.0, 5.0]]),
        noise="additive",
    )


# ---------------------------------------------------------------------------
# Hindmarsh-Rose


def _hr_rhs(p, u, t):
    x, y, z = _split(u)
    return _stack(u, [
        p[0] * y - p[1] * x**3 + p[2] * x**2 - p[3] * z,
        p[4] - p[5] * x**2 - p[6] * y,
        p[7] * x + p[8] - p[9] * z,
    ])


def _hr_jac_u(p, u, t):
    x, y, z = _split(u)
    J = _zeros(u, 3, 3)
    J[..., 0, 0] = -3 * p[1] * x**2 + 2 * p[2] * x
    J[..., 0, 1] = p[0]
    J[..., 0, 2] = -p[3]
    J[..., 1, 0] = -2 * p[5] * x
    J[..., 1, 1] = -p[6]
    J[..., 2, 0] = p[7]
    J[..., 2, 2] = -p[9]
    return J


def _hr_jac_p(p, u, t):
    x, y, z = _split(u)
    J = _zeros(u, 3, 10)
    J[..., 0, 0] = y
    J[..., 0, 1] = -x**3
    J[..., 0, 2] = x**2
    J[..., 0, 3] = -z
    J[..., 1, 4] = 1.0
    J[..., 1, 5] = -x**2
    J[..., 1, 6] = -y
    J[..., 2, 7] = x
    J[..., 2, 8] = 1.0
    J[..., 2, 9] = -z
    return J


def _hr_jac_up(p, u, t):
    x, y, z = _split(u)
    A = _zeros(u, 3, 3, 10)
    A[..., 0, 0, 1] = -3 * x**2
    A[..., 0, 0, 2] = 2 * x
    A[..., 0, 1, 0] = 1.0
    A[..., 0, 2, 3] = -1.0
    A[..., 1, 0, 5] = -2 * x
    A[..., 1, 1, 6] = -1.0
    A[..., 2, 0, 7] = 1.0
    A[..., 2, 2, 9] = -1.0
    return A


def hindmarsh_rose():
    model = OdeModel(
        "hindmarsh-rose", 3, 10, _hr_rhs, _hr_jac_u, _hr_jac_p, _hr_jac_up,
        lambda p, u, t: _zeros(u, 3, 10, 10), lambda p, u, t: _zeros(u, 3, 3, 10, 10),
        linear_in_params=True,
    )
    return BenchmarkSystem(
        model=model,
        u0=np.array([-1.31, -7.6, -0.2]),
        p_true=np.array([10.0, 10.0, 30.0, 10.0, 10.0, 50.0, 10.0, 0.04, 0.0319, 0.01]),
        T=10.0,
        init_box=np.array([[0, 20], [0, 20], [0, 60], [0, 20], [0, 20],
                           [0, 100], [0, 20], [0, 1], [0, 1], [0, 1]], dtype=float),
        noise="additive",
    )


# ---------------------------------------------------------------------------
# Goodwin (3 species, Hill repression)
#
# f1 = p1 / (2.15 + p3 u3^p4) - p2 u1 is written as the product
# p1 * h^-1 with h = 2.15 + p3 w, w = u3^p4, and its u3-derivative as
# -(p1) * (p3 p4 v) * h^-2 with v = u3^(p4-1).  Each factor carries its value,
# gradient and Hessian in p so products can be differentiated mechanically.

_GW_K = 2.15
_GW_J = 8


def _gw_factors(p, u3):
    L = np.log(u3)
    w = u3 ** p[3]
    v = u3 ** (p[3] - 1.0)
    h = _GW_K + p[2] * w
    shape = u3.shape
    # h and its p-derivatives (indices 2 = p3, 3 = p4)
    hg = np.zeros(shape + (_GW_J,))
    hH = np.zeros(shape + (_GW_J, _GW_J))
    hg[..., 2] = w
    hg[..., 3] = p[2] * w * L
    hH[..., 2, 3] = hH[..., 3, 2] = w * L
    hH[..., 3, 3] = p[2] * w * L**2
    return L, w, v, h, hg, hH


def _inv_pow(h, hg, hH, k):
    """Value, gradient and Hessian of h^-k."""
    val = h ** (-k)
    g = -k * h[..., None] ** (-k - 1) * hg
    H = (k * (k + 1) * h[..., None, None] ** (-k - 2) * hg[..., :, None] * hg[..., None, :]
         - k * h[..., None, None] ** (-k - 1) * hH)
    return val, g, H


def _prod(*factors):
    """Value, gradient and Hessian of a product of (value, grad, hess) factors."""
    val, g, H = factors[0]
    for v2, g2, H2 in factors[1:]:
        H = (H * v2[..., None, None] + H2 * val[..., None, None]
             + g[..., :, None] * g2[..., None, :] + g2[..., :, None] * g[..., None, :])
        g = g * v2[..., None] + g2 * val[..., None]
        val = val * v2
    return val, g, H


def _gw_p1(p, shape):
    g = np.zeros(shape + (_GW_J,))
    g[..., 0] = 1.0
    return np.full(shape, p[0]), g, np.zeros(shape + (_GW_J, _GW_J))


def _gw_p3p4v(p, v, L):
    shape = v.shape
    val = p[2] * p[3] * v
    g = np.zeros(shape + (_GW_J,))
    H = np.zeros(shape + (_GW_J, _GW_J))
    g[..., 2] = p[3] * v
    g[..., 3] = p[2] * v * (1 + p[3] * L)
    H[..., 2, 3] = H[..., 3, 2] = v * (1 + p[3] * L)
    H[..., 3, 3] = p[2] * v * L * (2 + p[3] * L)
    return val, g, H


def _gw_hill(p, u3):
    """(value, grad, hess) of p1/h and of d(p1/h)/du3."""
    L, w, v, h, hg, hH = _gw_factors(p, u3)
    shape = u3.shape
    a = _gw_p1(p, shape)
    hill = _prod(a, _inv_pow(h, hg, hH, 1))
    dval, dg, dH = _prod(a, _gw_p3p4v(p, v, L), _inv_pow(h, hg, hH, 2))
    return hill, (-dval, -dg, -dH)


def _gw_rhs(p, u, t):
    x, y, z = _split(u)
    return _stack(u, [
        p[0] / (_GW_K + p[2] * z ** p[3]) - p[1] * x,
        p[4] * x - p[5] * y,
        p[6] * y - p[7] * z,
    ])


def _gw_jac_u(p, u, t):
    x, y, z = _split(u)
    h = _GW_K + p[2] * z ** p[3]
    J = _zeros(u, 3, 3)
    J[..., 0, 0] = -p[1]
    J[..., 0, 2] = -p[0] * p[2] * p[3] * z ** (p[3] - 1.0) / h**2
    J[..., 1, 0] = p[4]
    J[..., 1, 1] = -p[5]
    J[..., 2, 1] = p[6]
    J[..., 2, 2] = -p[7]
    return J


def _gw_jac_p(p, u, t):
    x, y, z = _split(u)
    (_, hg, _), _ = _gw_hill(p, z)
    J = _zeros(u, 3, _GW_J)
    J[..., 0, :] = hg
    J[..., 0, 1] = -x
    J[..., 1, 4] = x
    J[..., 1, 5] = -y
    J[..., 2, 6] = y
    J[..., 2, 7] = -z
    return J


def _gw_jac_up(p, u, t):
    x, y, z = _split(u)
    _, (_, dg, _) = _gw_hill(p, z)
    A = _zeros(u, 3, 3, _GW_J)
    A[..., 0, 0, 1] = -1.0
    A[..., 0, 2, :] = dg
    A[..., 1, 0, 4] = 1.0
    A[..., 1, 1, 5] = -1.0
    A[..., 2, 1, 6] = 1.0
    A[..., 2, 2, 7] = -1.0
    return A


def _gw_hess_pp(p, u, t):
    (_, _, hH), _ = _gw_hill(p, u[..., 2])
    H = _zeros(u, 3, _GW_J, _GW_J)
    H[..., 0, :, :] = hH
    return H


def _gw_hess_upp(p, u, t):
    _, (_, _, dH) = _gw_hill(p, u[..., 2])
    H = _zeros(u, 3, 3, _GW_J, _GW_J)
    H[..., 0, 2, :, :] = dH
    return H


def goodwin():
    model = OdeModel(
        "goodwin", 3, _GW_J, _gw_rhs, _gw_jac_u, _gw_jac_p, _gw_jac_up, _gw_hess_pp, _gw_hess_upp,
        linear_in_params=False,
    )
    return BenchmarkSystem(
        model=model,
        u0=np.array([0.3617, 0.9137, 1.3934]),
        p_true=np.array([3.4884, 0.0969, 1.0, 10.0, 0.0969, 0.0581, 0.0969, 0.0775]),
        T=80.0,
        init_box=np.array([[1, 5], [0, 0.2], [0, 2], [5, 15], [0, 0.2],
                           [0, 0.2], [0, 0.2], [0, 0.2]], dtype=float),
        noise="lognormal",
    )


# ---------------------------------------------------------------------------
# SIR with time-delayed immunity
#
# c(p) = p1 e^{-p1 p2} / (1 - e^{-p1 p2}) = p1 / expm1(p1 p2)
# beta(p, t) = p4 (1 - e^{-p5 t^2}) = -p4 expm1(-p5 t^2)

_SIR_J = 5


def _sir_c(p, shape):
    """Value, gradient and Hessian of the waning-immunity rate c(p)."""
    a = p[0] * p[1]
    em = np.expm1(a)
    ea = em + 1.0
    q = 1.0 / em
    q1 = -ea / em**2
    q2 = ea * (ea + 1.0) / em**3
    g = np.zeros(_SIR_J)
    H = np.zeros((_SIR_J, _SIR_J))
    g[0] = q + a * q1
    g[1] = p[0] ** 2 * q1
    H[0, 0] = 2 * p[1] * q1 + p[0] * p[1] ** 2 * q2
    H[0, 1] = H[1, 0] = 2 * p[0] * q1 + p[0] ** 2 * p[1] * q2
    H[1, 1] = p[0] ** 3 * q2
    val = p[0] * q
    return (np.full(shape, val), np.broadcast_to(g, shape + (_SIR_J,)),
            np.broadcast_to(H, shape + (_SIR_J, _SIR_J)))


def _sir_beta(p, t, shape):
    t = np.broadcast_to(np.asarray(t, dtype=float), shape)
    t2 = t * t
    e = np.exp(-p[4] * t2)
    val = -p[3] * np.expm1(-p[4] * t2)
    g = np.zeros(shape + (_SIR_J,))
    H = np.zeros(shape + (_SIR_J, _SIR_J))
    g[..., 3] = -np.expm1(-p[4] * t2)
    g[..., 4] = p[3] * t2 * e
    H[..., 3, 4] = H[..., 4, 3] = t2 * e
    H[..., 4, 4] = -p[3] * t2**2 * e
    return val, g, H


def _sir_rhs(p, u, t):
    s, i, r = _split(u)
    c = _sir_c(p, s.shape)[0]
    b = _sir_beta(p, t, s.shape)[0]
    return _stack(u, [
        -p[0] * s + p[2] * i + c * r,
        p[0] * s - p[2] * i - b * i,
        b * i - c * r,
    ])


def _sir_jac_u(p, u, t):
    s = u[..., 0]
    c = _sir_c(p, s.shape)[0]
    b = _sir_beta(p, t, s.shape)[0]
    J = _zeros(u, 3, 3)
    J[..., 0, 0] = -p[0]
    J[..., 0, 1] = p[2]
    J[..., 0, 2] = c
    J[..., 1, 0] = p[0]
    J[..., 1, 1] = -p[2] - b
    J[..., 2, 1] = b
    J[..., 2, 2] = -c
    return J


def _sir_jac_p(p, u, t):
    s, i, r = _split(u)
    _, cg, _ = _sir_c(p, s.shape)
    _, bg, _ = _sir_beta(p, t, s.shape)
    J = _zeros(u, 3, _SIR_J)
    J[..., 0, :] = cg * r[..., None]
    J[..., 0, 0] -= s
    J[..., 0, 2] += i
    J[..., 1, :] = -bg * i[..., None]
    J[..., 1, 0] += s
    J[..., 1, 2] -= i
    J[..., 2, :] = bg * i[..., None] - cg * r[..., None]
    return J


def _sir_jac_up(p, u, t):
    s = u[..., 0]
    _, cg, _ = _sir_c(p, s.shape)
    _, bg, _ = _sir_beta(p, t, s.shape)
    A = _zeros(u, 3, 3, _SIR_J)
    A[..., 0, 0, 0] = -1.0
    A[..., 0, 1, 2] = 1.0
    A[..., 0, 2, :] = cg
    A[..., 1, 0, 0] = 1.0
    A[..., 1, 1, :] = -bg
    A[..., 1, 1, 2] -= 1.0
    A[..., 2, 1, :] = bg
    A[..., 2, 2, :] = -cg
    return A


def _sir_hess_pp(p, u, t):
    s, i, r = _split(u)
    _, _, cH = _sir_c(p, s.shape)
    _, _, bH = _sir_beta(p, t, s.shape)
    H = _zeros(u, 3, _SIR_J, _SIR_J)
    H[..., 0, :, :] = cH * r[..., None, None]
    H[..., 1, :, :] = -bH * i[..., None, None]
    H[..., 2, :, :] = bH * i[..., None, None] - cH * r[..., None, None]
    return H


def _sir_hess_upp(p, u, t):
    s = u[..., 0]
    _, _, cH = _sir_c(p, s.shape)
    _, _, bH = _sir_beta(p, t, s.shape)
    H = _zeros(u, 3, 3, _SIR_J, _SIR_J)
    H[..., 0, 2, :, :] = cH
    H[..., 1, 1, :, :] = -bH
    H[..., 2, 1, :, :] = bH
    H[..., 2, 2, :, :] = -cH
    return H


def sir_tdi():
    model = OdeModel(
        "sir-tdi", 3, _SIR_J, _sir_rhs, _sir_jac_u, _sir_jac_p, _sir_jac_up, _sir_hess_pp,
        _sir_hess_upp, linear_in_params=False,
    )
    box = np.array([[1e-4, 1], [1e-4, 2], [1e-4, 1], [1e-4, 1], [1e-4, 1]], dtype=float)
    # the published p1 range excludes p1* = 1.99, so the constraint box is widened there
    bounds = box.copy()
    bounds[0, 1] = 2.0
    return BenchmarkSystem(
        model=model,
        u0=np.array([1.0, 0.0, 0.0]),
        p_true=np.array([1.99, 1.5, 0.074, 0.113, 0.0024]),
        T=50.0,
        init_box=box,
        noise="lognormal",
        use_bounds=True,
        bounds=bounds,
    )


SYSTEMS = {
    "lorenz": lorenz,
    "hindmarsh-rose": hindmarsh_rose,
    "goodwin": goodwin,
    "sir-tdi": sir_tdi,
}

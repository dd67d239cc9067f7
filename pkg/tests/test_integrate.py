import numpy as np
import pytest
from dataclasses import replace

from wendy import builtin
from wendy.integrate import integrate, simulate, simulate_sensitivities, uniform_grid
from wendy.model import OdeModel


def _linear_model(stiff=False):
    # u' = A u + p with A = [[-1, 1], [0, -k]], p additive forcing
    def rhs(p, u, t):
        u = np.asarray(u)
        return np.stack([-u[..., 0] + u[..., 1] + p[0], -p[1] * u[..., 1]], axis=-1)

    def jac_u(p, u, t):
        u = np.asarray(u)
        out = np.zeros(u.shape[:-1] + (2, 2))
        out[..., 0, 0], out[..., 0, 1], out[..., 1, 1] = -1.0, 1.0, -p[1]
        return out

    def jac_p(p, u, t):
        u = np.asarray(u)
        out = np.zeros(u.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = -u[..., 1]
        return out

    def zeros(*s):
        return lambda p, u, t: np.zeros(np.asarray(u).shape[:-1] + s)

    return OdeModel("lin", 2, 2, rhs, jac_u, jac_p, zeros(2, 2, 2), zeros(2, 2, 2), zeros(2, 2, 2, 2),
                    stiff=stiff)


def test_uniform_grid():
    g = uniform_grid(2.0, 4)
    assert np.array_equal(g, [0.0, 0.5, 1.0, 1.5, 2.0])
    with pytest.raises(ValueError):
        uniform_grid(1.0, 0)


@pytest.mark.parametrize("stiff,tol", [(False, 1e-9), (True, 1e-7)])
def test_exponential_decay(stiff, tol):
    grid = np.linspace(0, 5, 51)
    Y, status, *_ = integrate(lambda t, y: -y, np.array([1.0]), grid, stiff=stiff,
                              jac=lambda t, y: -np.eye(1))
    assert status == "ok"
    assert np.max(np.abs(Y[:, 0] - np.exp(-grid))) < tol


def test_grid_hit_exactly():
    # solution of u' = 1 is t, so any interpolation would show up
    grid = np.linspace(0, 1, 7)
    Y, status, *_ = integrate(lambda t, y: np.ones(1), np.zeros(1), grid)
    assert np.allclose(Y[:, 0], grid, atol=1e-14)


def test_stiff_system():
    m = _linear_model(stiff=True)
    p = np.array([0.0, 1e4])
    grid = np.linspace(0, 1, 11)
    tr = simulate(m, p, np.array([1.0, 1.0]), grid, reltol=1e-8, abstol=1e-10)
    assert tr.ok and tr.nsteps < 5000
    # fast mode decays away; the slow one is exp(-t) plus a tiny forced part
    assert np.allclose(tr.U[-1, 0], np.exp(-1.0) * (1 + 1 / (1e4 - 1)) - np.exp(-1e4) / (1e4 - 1), rtol=1e-5)


def test_blow_up_is_reported():
    grid = np.linspace(0, 2, 21)
    Y, status, *_ = integrate(lambda t, y: y**2, np.array([1.0]), grid)
    assert status == "blew_up"
    assert np.isnan(Y[-1, 0]) and Y[0, 0] == 1.0


def test_simulate_matches_scipy():
    from scipy.integrate import solve_ivp

    s = builtin("lorenz", 2.0)
    grid = uniform_grid(s.T, 200)
    tr = simulate(s.model, s.p_true, s.u0, grid)
    ref = solve_ivp(lambda t, y: s.model.rhs(s.p_true, y, t), (0, s.T), s.u0, t_eval=grid,
                    rtol=1e-12, atol=1e-12, method="DOP853")
    assert tr.ok
    assert np.max(np.abs(tr.U - ref.y.T)) < 1e-6


@pytest.mark.parametrize("name", ["hindmarsh_rose", "goodwin", "sir_tdi"])
def test_sensitivities_match_fd(name):
    s = builtin(name)
    grid = uniform_grid(min(s.T, 10.0), 40)
    sens = simulate_sensitivities(s.model, s.p_true, s.u0, grid, reltol=1e-10, abstol=1e-10)
    assert sens.traj.ok
    scale = np.max(np.abs(sens.dU_dp))
    for j in range(s.model.J):
        h = 1e-6 * max(1.0, abs(s.p_true[j]))
        e = np.zeros(s.model.J)
        e[j] = h
        up = simulate(s.model, s.p_true + e, s.u0, grid).U
        dn = simulate(s.model, s.p_true - e, s.u0, grid).U
        assert np.max(np.abs((up - dn) / (2 * h) - sens.dU_dp[:, :, j])) < 1e-4 * scale
    d = 0
    e = np.zeros(s.model.D)
    e[d] = 1e-6
    fd = (simulate(s.model, s.p_true, s.u0 + e, grid).U - simulate(s.model, s.p_true, s.u0 - e, grid).U) / 2e-6
    assert np.max(np.abs(fd - sens.dU_du0[:, :, d])) < 1e-4 * max(1.0, np.max(np.abs(fd)))


def test_bad_shapes():
    s = builtin("lorenz")
    with pytest.raises(ValueError):
        simulate(s.model, s.p_true, np.zeros(2), uniform_grid(1, 10))
    with pytest.raises(ValueError):
        simulate(s.model, s.p_true[:2], s.u0, uniform_grid(1, 10))

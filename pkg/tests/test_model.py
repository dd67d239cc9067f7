import numpy as np
import pytest
from dataclasses import replace

from wendy import builtin, builtin_names, log_transform, verify_derivatives
from wendy.model import DerivativeMismatch, OdeModel

from conftest import SYSTEMS


def _samples(s, n=6, seed=0, positive=False):
    rng = np.random.default_rng(seed)
    P = s.p_true * rng.uniform(0.7, 1.3, (n, s.model.J))
    U = s.u0 + rng.uniform(0.1, 1.0, (n, s.model.D)) if positive else rng.normal(1.0, 1.0, (n, s.model.D))
    t = rng.uniform(0, s.T, n)
    return P, np.abs(U) + 0.1 if positive else U, t


def test_builtin_names():
    assert builtin_names() == ["goodwin", "hindmarsh-rose", "lorenz", "sir-tdi"]
    with pytest.raises(KeyError, match="unknown system"):
        builtin("van-der-pol")


@pytest.mark.parametrize("name", SYSTEMS)
def test_shapes(name):
    s = builtin(name)
    D, J = s.model.D, s.model.J
    assert s.p_true.shape == (J,) and s.u0.shape == (D,) and s.init_box.shape == (J, 2)
    U = np.ones((5, D)) + 0.1
    t = np.linspace(0, 1, 5)
    assert s.model.batch("rhs", s.p_true, U, t).shape == (5, D)
    assert s.model.batch("jac_up", s.p_true, U, t).shape == (5, D, D, J)
    assert s.model.batch("hess_upp", s.p_true, U, t).shape == (5, D, D, J, J)


def test_sir_rhs_at_start():
    # hand evaluation: -p1 * 1 + p3 * 0 + c * 0
    s = builtin("sir_tdi")
    f = s.model.rhs(s.p_true, s.u0, np.array(0.0))
    assert f[0] == pytest.approx(-1.99, abs=1e-12)
    assert f[1] == pytest.approx(1.99, abs=1e-12)
    assert f[2] == pytest.approx(0.0, abs=1e-12)


def test_sir_small_product_guard():
    s = builtin("sir_tdi")
    p = s.p_true.copy()
    p[0], p[1] = 1e-7, 1e-7
    f = s.model.rhs(p, np.array([0.0, 0.0, 1.0]), np.array(1.0))
    # p1 e^{-p1 p2} / (1 - e^{-p1 p2}) ~ 1 / p2 for tiny p1 p2
    assert f[0] == pytest.approx(1 / p[1], rel=1e-6)


def test_lorenz_rhs():
    s = builtin("lorenz")
    u = np.array([1.0, 2.0, 3.0])
    p = s.p_true
    f = s.model.rhs(p, u, np.array(0.0))
    assert np.allclose(f, [p[0] * (u[1] - u[0]), u[0] * (p[1] - u[2]) - u[1], u[0] * u[1] - p[2] * u[2]])


@pytest.mark.parametrize("name", SYSTEMS)
def test_derivatives_match_fd(name):
    s = builtin(name)
    P, U, t = _samples(s, positive=s.noise == "lognormal")
    errs = verify_derivatives(s.model, P, U, t)
    assert max(errs.values()) < 1e-5


@pytest.mark.parametrize("name", ["goodwin", "sir_tdi"])
def test_log_transform_derivatives(name):
    s = builtin(name)
    P, U, t = _samples(s, positive=True)
    lm = log_transform(s.model)
    assert max(verify_derivatives(lm, P, np.log(U), t).values()) < 1e-5
    # f~(x) = f(e^x) / e^x
    x = np.log(U[0])
    assert np.allclose(lm.rhs(P[0], x, t[0]), s.model.rhs(P[0], U[0], t[0]) / U[0])


def test_mismatch_names_callback():
    s = builtin("lorenz")
    bad = replace(s.model, jac_p=lambda p, u, t: 2.0 * s.model.jac_p(p, u, t))
    P, U, t = _samples(s)
    with pytest.raises(DerivativeMismatch, match="jac_p"):
        verify_derivatives(bad, P, U, t)


def test_linear_flags():
    assert builtin("lorenz").model.linear_in_params
    assert builtin("hindmarsh_rose").model.linear_in_params
    assert not builtin("goodwin").model.linear_in_params
    assert not builtin("sir_tdi").model.linear_in_params


def test_scalar_model_loop():
    # non-vectorized callbacks are looped over the batch
    m = OdeModel("decay", 1, 1, lambda p, u, t: -p[0] * u, lambda p, u, t: -p[0] * np.eye(1),
                 lambda p, u, t: -u[:, None], lambda p, u, t: -np.ones((1, 1, 1)),
                 lambda p, u, t: np.zeros((1, 1, 1)), lambda p, u, t: np.zeros((1, 1, 1, 1)),
                 vectorized=False)
    out = m.batch("rhs", np.array([2.0]), np.array([[1.0], [3.0]]), np.array([0.0, 1.0]))
    assert np.allclose(out, [[-2.0], [-6.0]])

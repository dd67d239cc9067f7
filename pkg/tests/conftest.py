import numpy as np
import pytest

from wendy import builtin
from wendy.integrate import simulate, uniform_grid
from wendy.weakform import build_problem

SYSTEMS = ["lorenz", "hindmarsh_rose", "goodwin", "sir_tdi"]


def small_problem(name, M=64, noise=0.05, seed=0, T=None):
    """Noisy weak problem on a coarse grid, with the system's noise model."""
    s = builtin(name, T if T is not None else (3.0 if name == "lorenz" else None))
    grid = uniform_grid(s.T, M)
    U = simulate(s.model, s.p_true, s.u0, grid).U
    rng = np.random.default_rng(seed)
    if s.noise == "lognormal":
        U = U * np.exp(noise * rng.standard_normal(U.shape))
    else:
        U = U + noise * np.sqrt(np.mean(U**2)) * rng.standard_normal(U.shape)
    return s, grid, U, build_problem(s.model, U, grid, noise=s.noise)


@pytest.fixture(params=SYSTEMS)
def system_problem(request):
    return small_problem(request.param)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "REPORT", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wendy.integrate import uniform_grid
from wendy.testfn import (
    ETA, K_MAX, bump_row, build_basis, candidate_radii, find_corner, min_radius, radius_scan,
)


def _bump_oracle(t, center, width):
    """Unnormalized bump and derivative straight from the closed form."""
    x = (t - center) / width
    out = np.zeros_like(t)
    dout = np.zeros_like(t)
    inside = np.abs(x) < 1
    q = 1 - x[inside] ** 2
    out[inside] = np.exp(-ETA / q)
    dout[inside] = out[inside] * (-ETA) * (2 * x[inside] / width) / q**2
    return out, dout


@settings(max_examples=30, deadline=None)
@given(r=st.integers(1, 60), M=st.integers(130, 400))
def test_bump_unit_norm(r, M):
    grid = uniform_grid(3.0, M)
    c = M // 2
    phi, _ = bump_row(c, r, M, grid[1])
    assert np.linalg.norm(phi) == pytest.approx(1.0, abs=1e-12)
    assert np.all(phi[: c - r + 1] == 0) and np.all(phi[c + r:] == 0)


@pytest.mark.parametrize("r", [3, 10, 25])
def test_bump_matches_closed_form(r):
    M = 100
    grid = uniform_grid(2.0, M)
    dt = grid[1]
    c = 40
    phi, dphi = bump_row(c, r, M, dt)
    ref, dref = _bump_oracle(grid, grid[c], r * dt)
    C = 1 / np.linalg.norm(ref)
    assert np.allclose(phi, C * ref, atol=1e-15)
    assert np.allclose(dphi, C * dref, rtol=1e-12, atol=1e-12 * np.max(np.abs(dref)) * C)


def test_bump_support_error():
    with pytest.raises(ValueError, match="leaves the grid"):
        bump_row(3, 5, 100, 0.1)
    with pytest.raises(ValueError):
        bump_row(50, 0, 100, 0.1)


def test_trapezoid_equivalence():
    M = 200
    grid = uniform_grid(4.0, M)
    dt = grid[1]
    v = np.cos(grid) + grid**2
    phi, _ = bump_row(90, 30, M, dt)
    # the bump vanishes at both ends, so the trapezoid rule is a plain sum times dt
    trap = np.sum(0.5 * (phi[1:] * v[1:] + phi[:-1] * v[:-1])) * dt
    assert dt * (phi @ v) == pytest.approx(trap, rel=1e-12)


def test_find_corner_two_lines():
    x = np.arange(1, 41, dtype=float)
    y = np.where(x <= 12, x**-3.0, 12.0**-3.0 * (x / 12) ** -0.1)
    assert find_corner(y, x) in (10, 11, 12)


def test_white_noise_picks_smallest():
    M = 512
    grid = uniform_grid(10.0, M)
    for seed in range(5):
        w = np.random.default_rng(seed).standard_normal(M + 1)
        assert radius_scan(w, grid[1]).corner_index == 0


def test_sinusoid_surrogate_decays():
    M = 512
    grid = uniform_grid(10.0, M)
    sc = radius_scan(np.sin(2 * np.pi * grid / 5), grid[1])
    e = sc.surrogate_errors
    assert e[-1] < 1e-5 * e[0]
    assert sc.corner_index > 0


def test_logistic_corner_shifts_with_noise():
    # u' = u - u^2, u(0) = 0.01
    M = 512
    grid = uniform_grid(10.0, M)
    dt = grid[1]
    u = 1 / (1 + 99 * np.exp(-grid))
    radii = np.unique(np.round(np.geomspace(2, 0.5 / dt, 25)).astype(int))
    scale = np.sqrt(np.mean(u**2))
    for seed in range(3):
        rng = np.random.default_rng(seed)
        lo = radius_scan(u + 1e-4 * scale * rng.standard_normal(M + 1), dt, radii).radius
        hi = radius_scan(u + 5e-2 * scale * rng.standard_normal(M + 1), dt, radii).radius
        assert hi < lo
    assert radius_scan(u, dt, radii).corner_index > 0


def test_scan_needs_four_radii():
    with pytest.raises(ValueError, match="at least 4"):
        radius_scan(np.zeros(65), 0.1, [2, 3, 4])


def test_candidate_radii_fit():
    for M in (16, 64, 256, 1024, 3000):
        r = candidate_radii(M)
        assert r.size >= 4 and r[0] >= 1 and 2 * r[-1] <= M


def test_surrogate_deterministic():
    grid = uniform_grid(5.0, 128)
    u = np.random.default_rng(1).standard_normal((129, 2))
    assert min_radius(u, grid[1]) == min_radius(u.copy(), grid[1])


@pytest.mark.parametrize("M", [64, 256])
def test_basis_properties(M):
    grid = uniform_grid(5.0, M)
    U = np.column_stack([np.sin(grid), np.cos(2 * grid)])
    b = build_basis(U, grid)
    assert 1 <= b.K <= min(K_MAX, M + 1)
    assert np.allclose(b.Phi @ b.Phi.T, np.eye(b.K), atol=1e-10)
    assert all(2 * r <= M for r in b.radii)
    assert b.Phi.shape == b.PhiDot.shape == (b.K, M + 1)
    # first and last grid points carry no weight
    assert np.allclose(b.Phi[:, [0, -1]], 0, atol=1e-12)


def test_integration_by_parts():
    # Phi u' = -PhiDot u for smooth u
    M = 400
    grid = uniform_grid(6.0, M)
    u = np.sin(grid) * np.exp(-0.1 * grid)
    du = np.cos(grid) * np.exp(-0.1 * grid) - 0.1 * u
    b = build_basis(u[:, None], grid, radii=[20, 40, 80])
    assert np.max(np.abs(b.Phi @ du + b.PhiDot @ u)) < 1e-8 * np.max(np.abs(b.PhiDot @ u))


def test_fixed_radii_and_bad_input():
    grid = uniform_grid(1.0, 50)
    b = build_basis(np.zeros((51, 1)), grid, radii=[5, 10, 100])
    assert b.radii == [5, 10]
    with pytest.raises(ValueError, match="rows"):
        build_basis(np.zeros((40, 1)), grid)

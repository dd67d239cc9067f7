"""Compactly supported bump test functions and the reduced test basis.

Each bump is ``phi(t) = C exp(-eta / [1 - ((t - t_k) / (m_t dt))^2]_+)``,
normalized to unit 2-norm on the grid.  A basis is built from bumps at every
admissible center for a few radii, then orthonormalized by a truncated SVD.
Rows of the returned ``Phi`` are orthonormal; ``PhiDot`` holds the matching
time derivatives, mapped through the same transform.

Inner products with the basis are plain sums over grid points.  The
trapezoid weight ``dt`` is common to both sides of the weak form and is left
out, which only rescales residuals and covariances by constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ETA = 9.0
RADIUS_MULTIPLIERS = (1, 2, 4, 8)
ENERGY_FLOOR = 0.9999
K_MAX = 500
MAX_CENTERS_PER_RADIUS = 512


@dataclass
class TestFunctionBasis:
    """Reduced test basis.

    ``Phi`` and ``PhiDot`` have shape (K, M + 1).  ``radii`` are the bump
    radii (in grid points) used before the SVD, ``min_radius`` the selected
    minimum radius and ``singular_values`` the full spectrum of the stacked
    bump matrix.
    """

    __test__ = False

    Phi: np.ndarray
    PhiDot: np.ndarray
    dt: float
    radii: list
    min_radius: int
    singular_values: np.ndarray = field(repr=False)
    eta: float = ETA

    @property
    def K(self) -> int:
        return self.Phi.shape[0]


def bump_row(center: int, radius: int, M: int, dt: float, eta: float = ETA):
    """One normalized bump and its derivative sampled on the M + 1 grid points.

    Raises ``ValueError`` if the support ``center +- radius`` leaves ``[0, M]``.
    """
    center, radius, M = int(center), int(radius), int(M)
    if radius < 1:
        raise ValueError(f"radius must be at least 1 grid point, got {radius}")
    if center - radius < 0 or center + radius > M:
        raise ValueError(
            f"bump support [{center - radius}, {center + radius}] leaves the grid [0, {M}]")
    phi, dphi = _bump_block(np.array([center]), radius, M, dt, eta)
    return phi[0], dphi[0]


def _bump_block(centers, radius, M, dt, eta=ETA):
    """Normalized bumps at ``centers`` with a common radius, plus derivatives."""
    m = np.arange(M + 1)
    x = (m[None, :] - centers[:, None]) / float(radius)
    inside = np.abs(x) < 1.0
    xi = np.where(inside, x, 0.0)
    q = 1.0 - xi**2
    with np.errstate(divide="ignore", over="ignore"):
        psi = np.where(inside, np.exp(-eta / q), 0.0)
        dpsi = np.where(inside, psi * (-2.0 * eta * xi / q**2), 0.0) / (radius * dt)
    norm = np.linalg.norm(psi, axis=1, keepdims=True)
    return psi / norm, dpsi / norm


def _centers(radius, M, max_centers=MAX_CENTERS_PER_RADIUS):
    lo, hi = radius, M - radius
    n = hi - lo + 1
    if n <= max_centers:
        return np.arange(lo, hi + 1)
    return np.unique(np.round(np.linspace(lo, hi, max_centers)).astype(int))


def find_corner(y, x=None) -> int:
    """Index of the corner of a curve via a two-segment least-squares fit in log-log space.

    Both segments are fitted independently and share the breakpoint.  If
    the left segment is not clearly decreasing (a flat curve, as for pure
    noise), returns 0.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    if x is None:
        x = np.arange(1, n + 1, dtype=float)
    x = np.asarray(x, dtype=float)
    if n < 4:
        return 0
    tiny = np.finfo(float).tiny
    ly = np.log(np.maximum(y, tiny))
    lx = np.log(x)
    best, best_i = np.inf, 0
    slopes = None
    # prefix sums for O(n) segment fits
    S = np.cumsum(np.vstack([np.ones(n), lx, ly, lx * lx, lx * ly, ly * ly]), axis=1)

    def seg(i0, i1):
        """LS line residual and slope over points [i0, i1] inclusive."""
        tot = S[:, i1] - (S[:, i0 - 1] if i0 > 0 else 0.0)
        cnt, sx, sy, sxx, sxy, syy = tot
        vx = sxx - sx * sx / cnt
        vxy = sxy - sx * sy / cnt
        vy = syy - sy * sy / cnt
        if vx <= 1e-300:
            return max(vy, 0.0), 0.0
        return max(vy - vxy * vxy / vx, 0.0), vxy / vx

    for i in range(1, n - 1):
        r1, s1 = seg(0, i)
        r2, s2 = seg(i, n - 1)
        if r1 + r2 < best:
            best, best_i, slopes = r1 + r2, i, (s1, s2)
    if slopes is None:
        return 0
    if not slopes[0] < -0.5:
        return 0
    return best_i


def radius_surrogate(u, radii, dt, s: int = 2):
    """Fourier surrogate of the weak-form integration error for each radius.

    For bumps of each radius centered across the grid, takes the DFT of the
    windowed data ``phi * u`` at mode ``floor(M / s)`` and returns the RMS
    magnitude over centers (scaled by ``2 pi / sqrt(T)``).
    """
    u = np.asarray(u, dtype=float)
    M = u.size - 1
    T = M * dt
    mode = M // s
    n = M + 1
    kernel = np.exp(-2j * np.pi * mode * np.arange(n) / n) * (T / n)
    out = []
    for r in radii:
        centers = _centers(int(r), M, 128)
        phi, _ = _bump_block(centers, int(r), M, dt)
        F = (phi * u[None, :]) @ kernel
        out.append(2 * np.pi / np.sqrt(T) * np.sqrt(np.mean(np.abs(F) ** 2)))
    return np.array(out)


def candidate_radii(M: int) -> np.ndarray:
    """Integer radii scanned by the minimum-radius search."""
    rmin = 2
    rmax = min(max(5, M // (2 * RADIUS_MULTIPLIERS[-1])), M // 2)
    if rmax <= rmin:
        return np.arange(1, max(rmin, rmax) + 1)
    return np.unique(np.round(np.geomspace(rmin, rmax, 30)).astype(int))


@dataclass
class RadiusScan:
    """Surrogate error per candidate radius and the detected corner."""

    candidate_radii: np.ndarray
    surrogate_errors: np.ndarray
    corner_index: int

    @property
    def radius(self) -> int:
        return int(self.candidate_radii[self.corner_index])


def radius_scan(u, dt, radii=None, s: int = 2) -> RadiusScan:
    """Scan candidate radii for one state and locate the corner of the surrogate curve."""
    u = np.asarray(u, dtype=float)
    radii = candidate_radii(u.size - 1) if radii is None else np.asarray(radii, dtype=int)
    if radii.size < 4:
        raise ValueError(f"need at least 4 candidate radii to locate a corner, got {radii.size}")
    e = radius_surrogate(u, radii, dt, s)
    return RadiusScan(radii, e, find_corner(e, radii))


def min_radius(U, dt, radii=None, s: int = 2) -> int:
    """Minimum bump radius (grid points) from the surrogate corner, pooled by max over states."""
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    return max(radius_scan(U[:, d], dt, radii, s).radius for d in range(U.shape[1]))


def build_basis(U, grid, *, radii=None, radius_multipliers=RADIUS_MULTIPLIERS, k_max: int = K_MAX,
                energy: float = ENERGY_FLOOR, max_centers: int = MAX_CENTERS_PER_RADIUS) -> TestFunctionBasis:
    """Adaptive test basis for data ``U`` (M + 1, D) on a uniform ``grid``.

    ``radii`` overrides the adaptive radius choice (list of radii in grid
    points).  Radii whose support cannot fit in the grid are dropped.
    """
    grid = np.asarray(grid, dtype=float)
    U = np.asarray(U, dtype=float)
    M = grid.size - 1
    if U.shape[0] != M + 1:
        raise ValueError(f"data has {U.shape[0]} rows but the grid has {M + 1} points")
    if M < 4:
        raise ValueError("need at least 5 grid points to build a test basis")
    dt = float(grid[1] - grid[0])
    rcap = M // 2
    if radii is None:
        r0 = min_radius(U, dt)
        radii = [min(r0 * m, rcap) for m in radius_multipliers]
    else:
        r0 = int(min(radii))
    radii = sorted({int(r) for r in radii if 1 <= int(r) <= rcap})
    if not radii:
        raise ValueError(f"no radius fits in a grid with M={M}")

    rows, drows = [], []
    for r in radii:
        c = _centers(r, M, max_centers)
        phi, dphi = _bump_block(c, r, M, dt)
        rows.append(phi)
        drows.append(dphi)
    Pf = np.vstack(rows)
    Pd = np.vstack(drows)

    W, sv, Vt = np.linalg.svd(Pf, full_matrices=False)
    K = _truncation(sv, energy, k_max)
    # P = diag(1/sigma) W^T maps the full bump set onto orthonormal rows
    Phi = Vt[:K].copy()
    PhiDot = (W[:, :K].T @ Pd) / sv[:K, None]
    return TestFunctionBasis(Phi, PhiDot, dt, radii, int(r0), sv)


def _truncation(sv, energy, k_max):
    sv = sv[sv > sv[0] * 1e-14]
    k_corner = find_corner(sv) + 1
    cum = np.cumsum(sv**2) / np.sum(sv**2)
    k_energy = int(np.searchsorted(cum, energy) + 1)
    K = max(k_corner, k_energy)
    return int(min(K, k_max, sv.size))

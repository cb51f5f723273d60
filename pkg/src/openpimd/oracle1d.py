"""Exact one-dimensional quantum statistics on a finite-difference grid.

Serves as ground truth for the 1D path-integral runs: eigenstates, the
thermal density matrix, ``n~(x)``, ``n(p)`` and the reduced-density-matrix
spectrum (which in one dimension is just the Boltzmann occupation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import eig_banded, eigh_tridiagonal

from .estimators import DistributionResult, momentum_transform


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid1D:
    extent: float = 6.0
    npoints: int = 2001

    def __post_init__(self):
        if self.npoints < 201:
            raise ValueError("oracle grid needs at least 201 points")
        if self.extent <= 0:
            raise ValueError("extent must be positive")

    @property
    def points(self) -> np.ndarray:
        return np.linspace(-self.extent, self.extent, self.npoints)

    @property
    def spacing(self) -> float:
        return 2.0 * self.extent / (self.npoints - 1)


@dataclass
class EigenSolution:
    grid: Grid1D
    energies: np.ndarray
    wavefunctions: np.ndarray  # (k, n_g), h-weighted orthonormal
    mass: float

    @property
    def splitting(self) -> float:
        return float(self.energies[1] - self.energies[0])

    def occupations(self, beta: float) -> np.ndarray:
        w = np.exp(-beta * (self.energies - self.energies[0]))
        return w / w.sum()

    def interpolate(self, points) -> np.ndarray:
        """Wavefunctions at arbitrary points (cubic spline, zero outside the grid)."""
        q = self.grid.points
        spline = CubicSpline(q, self.wavefunctions, axis=1)
        points = np.asarray(points, dtype=float)
        out = spline(points)
        return np.where((points >= q[0]) & (points <= q[-1]), out, 0.0)


def solve_schrodinger(grid: Grid1D, potential, mass: float, nstates: int = 10,
                      stencil: int = 3) -> EigenSolution:
    """Lowest ``nstates`` eigenpairs of ``-(1/2m) d^2/dq^2 + V`` with hard walls.

    ``stencil=3`` is the second-order central difference (tridiagonal);
    ``stencil=5`` the fourth-order one (pentadiagonal), useful when the
    ``h**2`` error of the former matters.  The walls sit one spacing beyond
    the grid ends.  ``potential`` is a callable on arrays of positions.
    """
    if nstates >= grid.npoints // 4:
        raise OracleError("nstates must be much smaller than the grid size")
    q = grid.points
    h = grid.spacing
    v = np.asarray(potential(q), dtype=float)
    if not np.all(np.isfinite(v)):
        raise OracleError("potential is not finite on the grid")
    k = 0.5 / (mass * h * h)
    try:
        if stencil == 3:
            energies, vecs = eigh_tridiagonal(2.0 * k + v, np.full(q.size - 1, -k),
                                              select="i", select_range=(0, nstates - 1))
        elif stencil == 5:
            bands = np.zeros((3, q.size))
            bands[0] = 2.5 * k + v
            bands[1, :-1] = -4.0 / 3.0 * k
            bands[2, :-2] = k / 12.0
            energies, vecs = eig_banded(bands, lower=True, select="i", select_range=(0, nstates - 1))
        else:
            raise OracleError(f"unsupported stencil {stencil}; use 3 or 5")
    except np.linalg.LinAlgError as exc:
        raise OracleError(f"banded eigensolver failed: {exc}") from exc
    psi = vecs.T / np.sqrt(h)
    # parity-friendly sign convention: positive lobe on the right
    for n in range(psi.shape[0]):
        ref = psi[n, q > 0]
        idx = np.argmax(np.abs(ref))
        if ref[idx] < 0:
            psi[n] = -psi[n]
    sol = EigenSolution(grid, energies, psi, mass)
    return sol


def edge_amplitude(sol: EigenSolution) -> np.ndarray:
    """Largest |psi_n| at the two outermost grid points, per state."""
    psi = sol.wavefunctions
    return np.max(np.abs(psi[:, [0, -1]]), axis=1)


def thermal_density_matrix(sol: EigenSolution, beta: float, coverage: float = 1e-8) -> np.ndarray:
    """``rho(r, r') = sum_n exp(-beta E_n) psi_n(r) psi_n(r') / Z`` on the grid."""
    w = sol.occupations(beta)
    if w[-1] > coverage:
        raise OracleError(f"highest retained state still has weight {w[-1]:.2e}; increase nstates")
    return (sol.wavefunctions.T * w) @ sol.wavefunctions


def kernel_on(sol: EigenSolution, beta: float, points) -> np.ndarray:
    """Thermal density matrix sampled at arbitrary points (spline-interpolated states)."""
    w = sol.occupations(beta)
    psi = sol.interpolate(points)
    return (psi.T * w) @ psi


def exact_ntilde(sol: EigenSolution, beta: float, max_shift: float | None = None) -> DistributionResult:
    """``n~(x) = int rho(r, r - x) dr`` at multiples of the grid spacing, ``n~(0) = 1``."""
    rho = thermal_density_matrix(sol, beta)
    h = sol.grid.spacing
    kmax = rho.shape[0] - 1 if max_shift is None else int(round(max_shift / h))
    ks = np.arange(-kmax, kmax + 1)
    vals = np.array([np.trace(rho, offset=int(k)) for k in ks]) * h
    vals = 0.5 * (vals + vals[::-1])
    return DistributionResult(ks * h, vals / vals[kmax], kind="ntilde", source="exact")


def exact_momentum_direct(sol: EigenSolution, beta: float, pgrid) -> DistributionResult:
    """``n(p) = sum_n w_n |psi_n(p)|^2`` from momentum-space wavefunctions."""
    q = sol.grid.points
    h = sol.grid.spacing
    p = np.asarray(pgrid, dtype=float)
    w = sol.occupations(beta)
    phase = np.exp(-1j * np.outer(p, q)) * h / np.sqrt(2 * np.pi)
    amp = phase @ sol.wavefunctions.T
    values = np.abs(amp) ** 2 @ w
    return DistributionResult(p, values, kind="np", normalization="int n dp = 1", source="exact")


def exact_ntilde_np(sol: EigenSolution, beta: float, pgrid=None, max_shift: float | None = None,
                    check_tol: float = 1e-6):
    """``(n~, n(p))`` with ``n(p)`` from the cosine transform, cross-checked against
    the momentum-space route."""
    nt = exact_ntilde(sol, beta, max_shift)
    if pgrid is None:
        pgrid = np.linspace(0.0, 20.0, 401)
    np_t = momentum_transform(nt, pgrid, tail_tol=np.inf)
    direct = exact_momentum_direct(sol, beta, pgrid)
    # both routes are normalised to int n dp = n~(0) = 1
    dev = np.max(np.abs(np_t.values - direct.values))
    if max_shift is None and dev > check_tol:
        raise OracleError(f"momentum routes disagree by {dev:.2e}")
    np_t.source = "exact"
    return nt, np_t


def ground_state_weight(delta_e: float, beta: float) -> float:
    """Ground-state weight ``1/(1 + exp(-beta dE))`` of a two-level system."""
    return float(1.0 / (1.0 + np.exp(-beta * delta_e)))


def default_double_well_solution(v0=0.006, a=0.6, mass=1836.0, grid: Grid1D | None = None,
                                 nstates: int = 12) -> EigenSolution:
    from .potentials import DoubleWell1D

    model = DoubleWell1D(v0=v0, a=a, mass=mass)
    return solve_schrodinger(grid or Grid1D(), model.value, mass, nstates)

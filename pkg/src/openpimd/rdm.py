"""Reduced density matrix of the tagged particle's endpoint coordinates.

The two-component order parameter ``(r, r')`` holds the projections of the
path's open ends on the B-C axis.  Once a 2D bias has flattened its
distribution, ``F2(r, r')`` gives ``rho~(r, r') ~ exp(-beta F2)``, whose
spectrum and eigenfunctions are analysed here.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .estimators import DistributionResult
from .pathcore import BCGeometry, PathGradient, PathState, SystemSpec, bc_geometry, zero_gradient
from .potentials import ConfigurationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RdmGrid:
    """Square ``[-bound, bound]^2`` split into ``bins`` cells per axis (odd, so 0 is a centre)."""

    bound: float = 1.8
    bins: int = 73

    def __post_init__(self):
        if self.bound <= 0:
            raise ConfigurationError("grid bound must be positive")
        if self.bins < 3 or self.bins % 2 == 0:
            raise ConfigurationError("bin count must be odd and at least 3")

    @property
    def delta(self) -> float:
        return 2.0 * self.bound / self.bins

    @property
    def centers(self) -> np.ndarray:
        return -self.bound + self.delta * (np.arange(self.bins) + 0.5)

    def mesh(self) -> np.ndarray:
        """Cell centres as ``(bins, bins, 2)`` with ``[i, j] = (r_i, r'_j)``."""
        c = self.centers
        return np.stack(np.meshgrid(c, c, indexing="ij"), axis=-1)


@dataclass
class SpectralDecomposition:
    """Eigenvalues (descending) and grid eigenvectors with ``sum psi^2 * delta = 1``."""

    eigenvalues: np.ndarray
    vectors: np.ndarray  # (n, bins)
    grid: np.ndarray
    delta: float

    def __len__(self):
        return len(self.eigenvalues)


@dataclass
class ExtrapolationFit:
    temperatures: np.ndarray
    values: np.ndarray
    slope: float
    intercept: float
    residuals: np.ndarray
    intercept_error: float = float("nan")

    def report(self) -> str:
        lines = ["# linear fit of eigenvalue against T = 1/beta",
                 f"slope = {self.slope!r}",
                 f"intercept = {self.intercept!r}",
                 f"intercept_error = {self.intercept_error!r}",
                 "T,value,residual"]
        lines += [f"{t!r},{v!r},{r!r}" for t, v, r in zip(self.temperatures, self.values, self.residuals)]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- order parameters


def order_params(state: PathState, system: SystemSpec, geo: BCGeometry | None = None) -> np.ndarray:
    """``(r, r')`` stacked on the last axis: ``r~_A^0 . e +/- x/2``."""
    if geo is None:
        geo = bc_geometry(state, system)
    c = np.sum(state.r[..., system.tagged, 0, :] * geo.e, axis=-1)
    half = 0.5 * state.x
    return np.stack([c + half, c - half], axis=-1)


class EndpointPairCV:
    """Two-component order parameter for the 2D bias."""

    ncomp = 2
    name = "r,r'"

    def value(self, state, system, geo=None):
        return order_params(state, system, geo)

    def backprop(self, state: PathState, system: SystemSpec, geo: BCGeometry, d_ds) -> PathGradient:
        grad = zero_gradient(state)
        g_c = d_ds[..., 0] + d_ds[..., 1]
        grad.x = 0.5 * (d_ds[..., 0] - d_ds[..., 1])
        a = system.tagged
        grad.r[..., a, 0, :] = g_c[..., None] * geo.e
        if system.anchors is not None:
            b, c = system.anchors
            jg = geo.apply_jacobian(g_c[..., None] * state.r[..., a, 0, :])
            grad.r[..., b, 0, :] += jg
            grad.r[..., c, 0, :] -= jg
        return grad


def ves2d_bias_forces(state: PathState, system: SystemSpec, bias2d) -> PathGradient:
    """Forces (negative gradient) of a :class:`~openpimd.ves.CVBias` on ``(r, r')``."""
    return bias2d.gradient(state, system).scaled(-1.0)


# ---------------------------------------------------------------- discretised kernel


def discretize_rho(F2, beta: float, delta: float) -> np.ndarray:
    """``exp(-beta F2) * delta``, symmetrised and scaled to unit trace."""
    F2 = np.asarray(F2, dtype=float)
    if F2.ndim != 2 or F2.shape[0] != F2.shape[1]:
        raise ConfigurationError("F2 must be a square table")
    if not np.all(np.isfinite(F2)):
        raise ConfigurationError("F2 has non-finite entries")
    m = np.exp(-beta * (F2 - F2.min())) * delta
    m = 0.5 * (m + m.T)
    trace = np.trace(m)
    if not trace > 0.0:
        # a density matrix is largest on its diagonal; an F2 whose minimum sits
        # far off it comes from a bias that is nowhere near converged
        gap = beta * (np.diag(F2).min() - F2.min())
        raise ConfigurationError(f"diagonal of exp(-beta F2) underflows (off-diagonal minimum {gap:.0f} kT lower)")
    return m / trace


def asymmetry(F2, beta: float) -> float:
    """Largest ``|M - M^T|`` relative to ``max M`` before symmetrisation."""
    F2 = np.asarray(F2, dtype=float)
    m = np.exp(-beta * (F2 - F2.min()))
    return float(np.max(np.abs(m - m.T)) / np.max(m))


def _jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 50):
    """Cyclic Jacobi with row-by-row sweep order."""
    a = np.array(a, dtype=float)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.max(np.abs(a)), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            return np.diag(a).copy(), v
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * ap - s * aq, s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    raise RuntimeError("Jacobi iteration did not converge")


def symmetric_eigensolve(m, delta: float = 1.0, grid=None, method: str = "lapack",
                         sym_tol: float = 1e-10) -> SpectralDecomposition:
    """Full spectrum of a symmetric matrix, largest first.

    Eigenvectors are divided by ``sqrt(delta)`` so they are normalised under
    the cell-weighted inner product, and each is signed so that its
    largest-magnitude entry is positive.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigurationError("matrix must be square")
    dev = np.max(np.abs(m - m.T)) if m.size else 0.0
    if dev > sym_tol * max(1.0, float(np.max(np.abs(m)))):
        raise ConfigurationError(f"matrix is not symmetric (max deviation {dev:.3g})")
    m = 0.5 * (m + m.T)
    if method == "lapack":
        w, v = np.linalg.eigh(m)
    elif method == "jacobi":
        w, v = _jacobi_eigh(m)
    else:
        raise ConfigurationError(f"unknown eigensolver {method!r}")
    order = np.argsort(-w, kind="stable")
    w, v = w[order], v[:, order].T
    idx = np.argmax(np.abs(v), axis=1)
    signs = np.sign(v[np.arange(len(w)), idx])
    signs[signs == 0] = 1.0
    v = v * signs[:, None] / np.sqrt(delta)
    if grid is None:
        grid = np.arange(m.shape[0], dtype=float) * delta
    return SpectralDecomposition(w, v, np.asarray(grid, dtype=float), float(delta))


def negative_eigenvalues(eigenvalues, errors, nsigma: float = 3.0) -> np.ndarray:
    """Indices of eigenvalues below ``-nsigma`` times their error."""
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    errors = np.asarray(errors, dtype=float)
    return np.nonzero(eigenvalues < -nsigma * errors)[0]


# ---------------------------------------------------------------- translation operator


def _shifted(psi, grid, shift):
    """``psi(grid + shift)`` by linear interpolation, zero beyond the sampled range."""
    grid = np.asarray(grid, dtype=float)
    h = grid[1] - grid[0]
    pos = (grid[None, :] + np.asarray(shift, dtype=float)[:, None] - grid[0]) / h
    i0 = np.floor(pos).astype(int)
    frac = pos - i0
    n = grid.size
    lo_ok = (i0 >= 0) & (i0 < n)
    hi_ok = (i0 + 1 >= 0) & (i0 + 1 < n)
    lo = np.where(lo_ok, psi[..., np.clip(i0, 0, n - 1)], 0.0)
    hi = np.where(hi_ok, psi[..., np.clip(i0 + 1, 0, n - 1)], 0.0)
    return (1.0 - frac) * lo + frac * hi


def translation_expectation(psi, grid, x) -> np.ndarray:
    """``<T_x> = int psi(r) psi(r + x) dr`` on a uniform grid.

    ``psi`` may hold several states on its leading axes; the result has shape
    ``psi.shape[:-1] + (len(x),)``.
    """
    psi = np.asarray(psi, dtype=float)
    grid = np.asarray(grid, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    h = grid[1] - grid[0]
    shifted = _shifted(psi, grid, x)  # (..., nx, n)
    return np.einsum("...n,...xn->...x", psi, shifted) * h


def reconstruct_ntilde(spec: SpectralDecomposition, xgrid, nstates: int | None = None) -> DistributionResult:
    """``n~(x) = sum_n rho_n <T_x>_n`` normalised to 1 at ``x = 0``."""
    k = len(spec) if nstates is None else min(nstates, len(spec))
    xgrid = np.asarray(xgrid, dtype=float)
    curves = translation_expectation(spec.vectors[:k], spec.grid, xgrid)
    values = spec.eigenvalues[:k] @ curves
    norm = spec.eigenvalues[:k] @ translation_expectation(spec.vectors[:k], spec.grid, [0.0])[:, 0]
    return DistributionResult(xgrid, values / norm, kind="ntilde", source="rdm")


# ---------------------------------------------------------------- extrapolation


def extrapolate_to_zero_T(pairs) -> ExtrapolationFit:
    """Ordinary least squares of the value against ``T = 1/beta``; intercept at ``T = 0``."""
    pairs = np.asarray(pairs, dtype=float)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ValueError("expected (beta, value) pairs")
    if pairs.shape[0] < 3:
        raise ValueError("need at least three (beta, value) pairs")
    if np.any(pairs[:, 0] <= 0):
        raise ValueError("beta must be positive")
    T = 1.0 / pairs[:, 0]
    y = pairs[:, 1]
    A = np.column_stack([T, np.ones_like(T)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    dof = len(y) - 2
    err = float("nan")
    if dof > 0:
        s2 = resid @ resid / dof
        cov = s2 * np.linalg.inv(A.T @ A)
        err = float(np.sqrt(cov[1, 1]))
    return ExtrapolationFit(T, y, float(coef[0]), float(coef[1]), resid, err)

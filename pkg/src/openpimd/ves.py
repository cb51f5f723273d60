"""Variationally enhanced sampling with Chebyshev bias expansions.

The bias ``V_b(s) = sum_k alpha_k G_k(s)`` is optimised by minimising the
convex functional Omega with averaged stochastic gradient descent:

    alpha <- alpha - mu * (g + H (alpha - alpha_avg))

where ``g_k = -<G_k>_biased + <G_k>_target`` and ``H = beta Cov_biased(G)`` are
estimated from the samples of one interval.  Sampling always uses the running
average ``alpha_avg``; at convergence ``F(s) = -V_b(s) - log p_t(s) / beta``.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .pathcore import BCGeometry, PathGradient, PathState, SystemSpec, bc_geometry, zero_gradient
from .potentials import ConfigurationError

log = logging.getLogger(__name__)

GAUSS_LEGENDRE_POINTS = 64


class DegenerateSamplesWarning(RuntimeWarning):
    pass


class VesDivergedError(RuntimeError):
    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = records or []


def chebyshev_eval(order: int, t):
    """``(T_k(t), T_k'(t))`` by the three-term recurrence; ``t`` clamped to [-1, 1]."""
    values, derivs = chebyshev_table(order, t)
    return values[..., order], derivs[..., order]


def chebyshev_table(max_order: int, t):
    """Values and derivatives of ``T_0 .. T_max_order`` stacked on the last axis.

    Derivatives use ``T_k' = k U_{k-1}`` with the second-kind recurrence.
    """
    t = np.clip(np.asarray(t, dtype=float), -1.0, 1.0)
    shape = t.shape + (max_order + 1,)
    T = np.empty(shape)
    dT = np.empty(shape)
    T[..., 0] = 1.0
    dT[..., 0] = 0.0
    if max_order >= 1:
        T[..., 1] = t
        dT[..., 1] = 1.0
        u_prev = np.ones_like(t)
        u_cur = 2.0 * t
        for k in range(2, max_order + 1):
            T[..., k] = 2.0 * t * T[..., k - 1] - T[..., k - 2]
            dT[..., k] = k * u_cur
            u_prev, u_cur = u_cur, 2.0 * t * u_cur - u_prev
    return T, dT


@dataclass
class BasisSet:
    """Chebyshev basis on a box mapped affinely onto ``[-1, 1]`` per coordinate.

    ``kind="even1d"`` uses ``T_2, T_4, ..., T_{2n}``; ``kind="product2d"`` uses
    ``T_i(t_1) T_j(t_2)`` for ``0 <= i, j <= max_order`` (index ``i*(n+1)+j``).
    """

    kind: str
    domain: tuple
    n_functions: int = 12
    max_order: int = 10

    def __post_init__(self):
        dom = np.atleast_2d(np.asarray(self.domain, dtype=float))
        if self.kind == "even1d":
            if dom.shape != (1, 2):
                raise ConfigurationError("1D basis needs one (lo, hi) interval")
        elif self.kind == "product2d":
            if dom.shape != (2, 2):
                raise ConfigurationError("2D basis needs two (lo, hi) intervals")
        else:
            raise ConfigurationError(f"unknown basis kind {self.kind!r}")
        if np.any(dom[:, 1] <= dom[:, 0]):
            raise ConfigurationError("basis domain must have hi > lo")
        self.domain = tuple(tuple(float(v) for v in row) for row in dom)
        self._lo = dom[:, 0]
        self._hi = dom[:, 1]

    @classmethod
    def even_1d(cls, lo=-3.0, hi=3.0, n_functions=12):
        return cls("even1d", ((lo, hi),), n_functions=n_functions)

    @classmethod
    def product_2d(cls, lo=-1.8, hi=1.8, max_order=10):
        return cls("product2d", ((lo, hi), (lo, hi)), max_order=max_order)

    @property
    def ndim(self) -> int:
        return len(self.domain)

    @property
    def size(self) -> int:
        if self.kind == "even1d":
            return self.n_functions
        return (self.max_order + 1) ** 2

    @property
    def orders(self) -> list:
        if self.kind == "even1d":
            return [2 * (k + 1) for k in range(self.n_functions)]
        n = self.max_order + 1
        return [(i, j) for i in range(n) for j in range(n)]

    @property
    def scale(self) -> np.ndarray:
        """``dt/ds`` per coordinate."""
        return 2.0 / (self._hi - self._lo)

    def to_unit(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return (2.0 * s - (self._lo + self._hi)) / (self._hi - self._lo)

    def from_unit(self, t) -> np.ndarray:
        return 0.5 * (np.asarray(t) * (self._hi - self._lo) + (self._lo + self._hi))

    def _as_points(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.ndim == 1 and (s.ndim == 0 or s.shape[-1] != 1):
            s = s[..., None]
        if s.shape[-1] != self.ndim:
            raise ConfigurationError(f"expected {self.ndim}-component order parameter")
        return s

    def inside(self, s) -> np.ndarray:
        s = self._as_points(s)
        return np.all((s >= self._lo) & (s <= self._hi), axis=-1)

    def evaluate(self, s, derivatives: bool = True):
        """Basis values ``(..., K)`` and gradients ``(..., K, ndim)`` w.r.t. ``s``.

        Points outside the domain are clamped to its boundary, where the
        gradient vanishes.
        """
        s = self._as_points(s)
        t = self.to_unit(s)
        outside = np.abs(t) > 1.0
        if self.kind == "even1d":
            T, dT = chebyshev_table(2 * self.n_functions, t[..., 0])
            vals = T[..., 2::2]
            if not derivatives:
                return vals, None
            d = np.where(outside, 0.0, dT[..., 2::2] * self.scale[0])
            return vals, d[..., None]
        n = self.max_order + 1
        T1, d1 = chebyshev_table(self.max_order, t[..., 0])
        T2, d2 = chebyshev_table(self.max_order, t[..., 1])
        vals = (T1[..., :, None] * T2[..., None, :]).reshape(T1.shape[:-1] + (n * n,))
        if not derivatives:
            return vals, None
        d1 = np.where(outside[..., 0:1], 0.0, d1 * self.scale[0])
        d2 = np.where(outside[..., 1:2], 0.0, d2 * self.scale[1])
        g1 = (d1[..., :, None] * T2[..., None, :]).reshape(vals.shape)
        g2 = (T1[..., :, None] * d2[..., None, :]).reshape(vals.shape)
        return vals, np.stack([g1, g2], axis=-1)

    def target_expectation(self, npoints: int = GAUSS_LEGENDRE_POINTS) -> np.ndarray:
        """``E[G_k]`` under the uniform distribution on the domain (Gauss-Legendre)."""
        nodes, weights = np.polynomial.legendre.leggauss(npoints)
        weights = weights / 2.0
        if self.ndim == 1:
            vals, _ = self.evaluate(self.from_unit(nodes[:, None]), derivatives=False)
            return weights @ vals
        g = np.stack(np.meshgrid(nodes, nodes, indexing="ij"), axis=-1).reshape(-1, 2)
        w = np.outer(weights, weights).ravel()
        vals, _ = self.evaluate(self.from_unit(g), derivatives=False)
        return w @ vals

    def to_dict(self) -> dict:
        return {"kind": self.kind, "domain": [list(d) for d in self.domain],
                "n_functions": self.n_functions, "max_order": self.max_order}

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSet":
        return cls(d["kind"], tuple(tuple(x) for x in d["domain"]), d.get("n_functions", 12), d.get("max_order", 10))


@dataclass
class BiasState:
    """Coefficients of the bias expansion and their running average."""

    basis: BasisSet
    beta: float
    mu: float
    alpha: np.ndarray | None = None
    alpha_avg: np.ndarray | None = None
    iteration: int = 0

    def __post_init__(self):
        k = self.basis.size
        self.alpha = np.zeros(k) if self.alpha is None else np.array(self.alpha, dtype=float)
        self.alpha_avg = self.alpha.copy() if self.alpha_avg is None else np.array(self.alpha_avg, dtype=float)
        if self.alpha.shape != (k,) or self.alpha_avg.shape != (k,):
            raise ConfigurationError(f"expected {k} coefficients")
        if self.mu <= 0 or self.beta <= 0:
            raise ConfigurationError("mu and beta must be positive")
        self._target = None

    @property
    def target(self) -> np.ndarray:
        if self._target is None:
            self._target = self.basis.target_expectation()
        return self._target

    def target_density(self, s) -> np.ndarray:
        """Uniform target: ``1/volume`` inside the domain, 0 outside."""
        vol = float(np.prod(self.basis._hi - self.basis._lo))
        return np.where(self.basis.inside(s), 1.0 / vol, 0.0)

    def copy(self) -> "BiasState":
        return BiasState(self.basis, self.beta, self.mu, self.alpha.copy(), self.alpha_avg.copy(), self.iteration)

    def to_dict(self) -> dict:
        return {
            "basis": self.basis.to_dict(),
            "beta": self.beta,
            "mu": self.mu,
            "alpha": self.alpha.tolist(),
            "alpha_avg": self.alpha_avg.tolist(),
            "iteration": self.iteration,
            "target": "uniform",
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BiasState":
        return cls(BasisSet.from_dict(d["basis"]), d["beta"], d["mu"], d["alpha"], d["alpha_avg"], d["iteration"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "BiasState":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def eval_bias(bias: BiasState, s, coefficients=None):
    """Bias value and gradient at ``s`` (uses ``alpha_avg`` unless told otherwise)."""
    coef = bias.alpha_avg if coefficients is None else np.asarray(coefficients, dtype=float)
    vals, grads = bias.basis.evaluate(s)
    value = vals @ coef
    grad = np.einsum("...kd,k->...d", grads, coef)
    if bias.basis.ndim == 1:
        grad = grad[..., 0]
    return value, grad


# ---------------------------------------------------------------- statistics


class BasisAccumulator:
    """Running mean and co-moment of basis values; merging is associative."""

    def __init__(self, size: int):
        self.n = 0
        self.mean = np.zeros(size)
        self.m2 = np.zeros((size, size))

    def add(self, values: np.ndarray):
        values = np.atleast_2d(values)
        other = BasisAccumulator(values.shape[1])
        other.n = values.shape[0]
        if other.n == 0:
            return self
        other.mean = values.mean(axis=0)
        dev = values - other.mean
        other.m2 = dev.T @ dev
        return self.merge(other)

    def merge(self, other: "BasisAccumulator"):
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.m2 = other.n, other.mean.copy(), other.m2.copy()
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        self.m2 = self.m2 + other.m2 + np.outer(delta, delta) * (self.n * other.n / n)
        self.mean = self.mean + delta * (other.n / n)
        self.n = n
        return self

    def gradient(self, target: np.ndarray) -> np.ndarray:
        if self.n == 0:
            raise ValueError("no samples accumulated")
        return -self.mean + target

    def hessian(self, beta: float) -> np.ndarray:
        if self.n < 2:
            raise ValueError("Hessian needs at least two samples")
        h = beta * self.m2 / self.n
        return 0.5 * (h + h.T)


def omega_gradient(samples, basis: BasisSet, target=None) -> np.ndarray:
    """``-<G_k>_samples + E_target[G_k]``."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("omega_gradient needs at least one sample")
    vals, _ = basis.evaluate(samples, derivatives=False)
    vals = vals.reshape(-1, basis.size)
    if target is None:
        target = basis.target_expectation()
    return -vals.mean(axis=0) + target


def omega_hessian(samples, basis: BasisSet, beta: float) -> np.ndarray:
    """``beta * Cov(G_k, G_k')`` over the biased samples (population covariance)."""
    samples = np.asarray(samples, dtype=float)
    vals, _ = basis.evaluate(samples, derivatives=False)
    vals = vals.reshape(-1, basis.size)
    if vals.shape[0] < 2:
        raise ValueError("omega_hessian needs at least two samples")
    if not np.any(np.ptp(vals, axis=0)):
        warnings.warn("all samples give identical basis values; Hessian is zero", DegenerateSamplesWarning)
        return np.zeros((basis.size, basis.size))
    return BasisAccumulator(basis.size).add(vals).hessian(beta)


def update_coefficients(bias: BiasState, gradient, hessian) -> BiasState:
    """One averaged stochastic-descent step (in place); returns ``bias``."""
    gradient = np.asarray(gradient, dtype=float)
    hessian = np.asarray(hessian, dtype=float)
    step = gradient + hessian @ (bias.alpha - bias.alpha_avg)
    alpha = bias.alpha - bias.mu * step
    if not np.all(np.isfinite(alpha)):
        raise VesDivergedError(f"non-finite coefficients at iteration {bias.iteration}")
    bias.alpha = alpha
    bias.iteration += 1
    bias.alpha_avg = bias.alpha_avg + (alpha - bias.alpha_avg) / (bias.iteration + 1)
    return bias


def recover_free_energy(bias: BiasState, grid=None, coefficients=None, npoints: int = 601):
    """``F = -V_b - log(p_t)/beta`` on ``grid`` inside the domain, shifted to ``min F = 0``.

    Returns ``(grid, F)``; for 2D bases ``grid`` is a pair of axes and ``F``
    has shape ``(len(axis0), len(axis1))``.
    """
    basis = bias.basis
    if basis.ndim == 1:
        if grid is None:
            (lo, hi), = basis.domain
            grid = np.linspace(lo, hi, npoints)
        grid = np.asarray(grid, dtype=float)
        grid = grid[basis.inside(grid)]
        points = grid
    else:
        if grid is None:
            grid = tuple(np.linspace(lo, hi, npoints) for lo, hi in basis.domain)
        axes = tuple(np.asarray(g, dtype=float) for g in grid)
        axes = tuple(a[(a >= lo) & (a <= hi)] for a, (lo, hi) in zip(axes, basis.domain))
        grid = axes
        points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    value, _ = eval_bias(bias, points, coefficients)
    free = -value - np.log(bias.target_density(points)) / bias.beta
    return grid, free - np.min(free)


# ---------------------------------------------------------------- CV biases


class EndToEndCV:
    """Order parameter ``s = x``, the modified end-to-end displacement."""

    ncomp = 1
    name = "x"

    def value(self, state: PathState, system: SystemSpec, geo: BCGeometry | None = None) -> np.ndarray:
        return np.asarray(state.x, dtype=float)[..., None]

    def backprop(self, state, system, geo, d_ds) -> PathGradient:
        grad = zero_gradient(state)
        grad.x = np.array(d_ds[..., 0], dtype=float)
        return grad


@dataclass
class SoftWalls:
    """Half-harmonic walls ``k/2 (|s| - bound)^2`` outside ``[-bound, bound]`` per component."""

    bound: float
    stiffness: float = 1.0

    def energy_and_gradient(self, s):
        excess = np.abs(s) - self.bound
        out = excess > 0
        energy = 0.5 * self.stiffness * np.sum(np.where(out, excess * excess, 0.0), axis=-1)
        grad = np.where(out, self.stiffness * excess * np.sign(s), 0.0)
        return energy, grad


class CVBias:
    """Bias potential on an order parameter, pluggable into the path Hamiltonian."""

    def __init__(self, state: BiasState, cv, walls: SoftWalls | None = None):
        if cv.ncomp != state.basis.ndim:
            raise ConfigurationError("order parameter and basis dimensions differ")
        self.state = state
        self.cv = cv
        self.walls = walls

    def energy(self, path: PathState, system: SystemSpec, geo=None) -> np.ndarray:
        s = self.cv.value(path, system, geo)
        v, _ = eval_bias(self.state, s)
        if self.walls is not None:
            v = v + self.walls.energy_and_gradient(s)[0]
        return v

    def gradient(self, path: PathState, system: SystemSpec, geo=None) -> PathGradient:
        if geo is None:
            geo = bc_geometry(path, system)
        s = self.cv.value(path, system, geo)
        _, d = eval_bias(self.state, s)
        d = np.reshape(d, s.shape)
        if self.walls is not None:
            d = d + self.walls.energy_and_gradient(s)[1]
        return self.cv.backprop(path, system, geo, d)


# ---------------------------------------------------------------- logs


@dataclass
class VesIterationRecord:
    iteration: int
    alpha: np.ndarray
    alpha_avg: np.ndarray
    grad_norm: float
    nsamples: int


def write_records(path, records) -> None:
    records = list(records)
    if not records:
        raise ValueError("no records to write")
    k = len(records[0].alpha)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration"] + [f"alpha_{i}" for i in range(k)]
                   + [f"alpha_avg_{i}" for i in range(k)] + ["grad_norm", "nsamples"])
        for r in records:
            w.writerow([r.iteration] + [repr(float(a)) for a in r.alpha]
                       + [repr(float(a)) for a in r.alpha_avg] + [repr(float(r.grad_norm)), r.nsamples])


def read_records(path) -> list[VesIterationRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, rows = rows[0], rows[1:]
    k = sum(1 for h in header if h.startswith("alpha_") and not h.startswith("alpha_avg_"))
    out = []
    for row in rows:
        vals = [float(v) for v in row]
        out.append(VesIterationRecord(int(vals[0]), np.array(vals[1:1 + k]), np.array(vals[1 + k:1 + 2 * k]),
                                      vals[1 + 2 * k], int(vals[2 + 2 * k])))
    return out


def stationary_start(grad_norms, window: int = 20, rtol: float = 0.25) -> int | None:
    """First iteration from which the gradient norm has reached its plateau.

    The series is cut into windows of ``window`` iterations; the plateau level
    is the median window mean over the second half of the run.  The start is
    the first window after which no window mean exceeds the larger of
    ``(1 + rtol)`` times that level and the level plus three standard errors
    of a window mean (from the typical within-window scatter, so a trend does
    not count as noise).  The second term keeps noise-dominated plateaus, as
    with very small bases, from being rejected.  Returns ``None`` when fewer than four windows are available.
    The thresholds are heuristics, not published values.
    """
    g = np.asarray(grad_norms, dtype=float)
    nwin = g.size // window
    if nwin < 4:
        return None
    windows = g[: nwin * window].reshape(nwin, window)
    means = windows.mean(axis=1)
    level = np.median(means[nwin // 2:])
    spread = np.median(windows[nwin // 2:].std(axis=1, ddof=1)) / np.sqrt(window)
    above = np.nonzero(means > max((1.0 + rtol) * level, level + 3.0 * spread))[0]
    first = 0 if above.size == 0 else above[-1] + 1
    if first >= nwin // 2 + 1:
        return None
    return int(first * window)

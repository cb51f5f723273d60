"""End-to-end and momentum distributions with their statistical errors."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class DistributionResult:
    """Values of ``n~(x)`` or ``n(p)`` on a grid, with pointwise standard errors."""

    grid: np.ndarray
    values: np.ndarray
    errors: np.ndarray | None = None
    kind: str = "ntilde"
    normalization: str = "ntilde(0)=1"
    source: str = "pimd"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.errors is None:
            self.errors = np.zeros_like(self.values)
        self.errors = np.asarray(self.errors, dtype=float)

    def at(self, points) -> np.ndarray:
        return np.interp(points, self.grid, self.values)

    def write_csv(self, path, header: dict | None = None) -> None:
        label = "x" if self.kind == "ntilde" else "p"
        with open(path, "w", newline="") as fh:
            meta = dict(header or {})
            meta.setdefault("source", self.source)
            meta.setdefault("normalization", self.normalization)
            for key, value in meta.items():
                fh.write(f"# {key} = {value}\n")
            w = csv.writer(fh)
            w.writerow([label, self.kind if self.kind == "ntilde" else "n", "sigma"])
            for g, v, e in zip(self.grid, self.values, self.errors):
                w.writerow([repr(float(g)), repr(float(v)), repr(float(e))])

    @classmethod
    def read_csv(cls, path) -> "DistributionResult":
        meta = {}
        rows = []
        with open(path) as fh:
            for line in fh:
                if line.startswith("#"):
                    key, _, value = line[1:].partition("=")
                    meta[key.strip()] = value.strip()
                else:
                    rows.append(line)
        data = list(csv.reader(rows))
        header, body = data[0], np.array(data[1:], dtype=float)
        kind = "ntilde" if header[1] == "ntilde" else "np"
        return cls(body[:, 0], body[:, 1], body[:, 2], kind=kind,
                   normalization=meta.get("normalization", ""), source=meta.get("source", ""))


@dataclass
class SeriesStats:
    block_sizes: np.ndarray
    standard_errors: np.ndarray
    block_size: int
    effective_samples: float
    mean: float
    standard_error: float
    variance: float = 0.0
    n: int = 0


def ntilde_from_free_energy(grid, free_energy, beta: float, source: str = "pimd") -> DistributionResult:
    """``n~(x) = exp(-beta (F(x) - F(0)))`` so that ``n~(0) = 1``."""
    grid = np.asarray(grid, dtype=float)
    free_energy = np.asarray(free_energy, dtype=float)
    zero = np.nonzero(np.isclose(grid, 0.0, atol=1e-12))[0]
    if zero.size == 0:
        raise ValueError("free-energy grid must contain x = 0")
    values = np.exp(-beta * (free_energy - free_energy[zero[0]]))
    return DistributionResult(grid, values, kind="ntilde", source=source)


def momentum_transform(ntilde: DistributionResult, pgrid=None, tail_tol: float = 1e-8) -> DistributionResult:
    """``n(p) = (1/2pi) int cos(p x) n~(x) dx`` by the trapezoidal rule (hbar = 1).

    Errors, if present, are propagated linearly assuming independent points;
    use :func:`bootstrap_distribution` for correlated uncertainties.
    """
    x = ntilde.grid
    v = ntilde.values
    if max(abs(v[0]), abs(v[-1])) > tail_tol * max(np.max(np.abs(v)), 1e-300):
        warnings.warn("n~(x) has not decayed at the grid edge; n(p) will ring", RuntimeWarning)
    if pgrid is None:
        pgrid = np.linspace(0.0, 20.0, 401)
    pgrid = np.asarray(pgrid, dtype=float)
    w = np.full_like(x, 0.0)
    dx = np.diff(x)
    w[:-1] += 0.5 * dx
    w[1:] += 0.5 * dx
    kernel = np.cos(np.outer(pgrid, x)) * w / (2.0 * np.pi)
    values = kernel @ v
    errors = np.sqrt((kernel**2) @ (ntilde.errors**2))
    return DistributionResult(pgrid, values, errors, kind="np", normalization=ntilde.normalization,
                              source=ntilde.source)


def classical_momentum(mass: float, beta: float, pgrid) -> DistributionResult:
    """Maxwell-Boltzmann ``sqrt(beta/(2 pi m)) exp(-beta p^2/(2m))``."""
    if mass <= 0 or beta <= 0:
        raise ValueError("mass and beta must be positive")
    p = np.asarray(pgrid, dtype=float)
    values = np.sqrt(beta / (2 * np.pi * mass)) * np.exp(-beta * p * p / (2 * mass))
    return DistributionResult(p, values, kind="np", normalization="int n dp = 1", source="classical")


def momentum_variance(dist: DistributionResult, symmetric: bool = True) -> float:
    """``<p^2>`` of a momentum distribution given on ``p >= 0`` (or a full grid)."""
    p, n = dist.grid, dist.values
    norm = np.trapezoid(n, p)
    return float(np.trapezoid(p * p * n, p) / norm)


def block_average(series, min_blocks: int = 16, rtol: float = 0.05) -> SeriesStats:
    """Standard error versus block size and the plateau block size.

    Block sizes are powers of two with at least ``min_blocks`` blocks.  The
    chosen block size is the smallest whose standard error is within ``rtol``
    of the largest one over bigger blocks, each of those first lowered by two
    of its own sampling errors ``SE / sqrt(2 (nblocks - 1))`` so that noise in
    the few-block estimates does not push the choice upwards.
    """
    x = np.asarray(series, dtype=float)
    n = x.size
    if n < 16:
        raise ValueError("block averaging needs at least 16 samples")
    sizes, errs, nbs = [], [], []
    b = 1
    while n // b >= min(min_blocks, n):
        nb = n // b
        means = x[: nb * b].reshape(nb, b).mean(axis=1)
        sizes.append(b)
        errs.append(np.std(means, ddof=1) / np.sqrt(nb))
        nbs.append(nb)
        b *= 2
    sizes = np.array(sizes)
    errs = np.array(errs)
    nbs = np.array(nbs)
    lower = errs * (1.0 - 2.0 / np.sqrt(2.0 * (nbs - 1)))
    chosen = len(sizes) - 1
    for i in range(len(sizes)):
        ref = np.max(lower[i + 1:]) if i + 1 < len(sizes) else 0.0
        if errs[i] >= (1.0 - rtol) * ref:
            chosen = i
            break
    var = float(np.var(x))
    se = float(errs[chosen])
    neff = float(n) if se == 0.0 else var / se**2
    return SeriesStats(sizes, errs, int(sizes[chosen]), min(neff, float(n)), float(x.mean()), se, var, n)


def coefficient_blocks(alpha_trajectory, block_size: int | None = None) -> np.ndarray:
    """Block means of a coefficient trajectory ``(iterations, K)``.

    Without ``block_size`` the largest plateau block size over all
    coefficients (from :func:`block_average`) is used.
    """
    a = np.asarray(alpha_trajectory, dtype=float)
    if block_size is None:
        block_size = 1
        for k in range(a.shape[1]):
            if np.ptp(a[:, k]) > 0:
                block_size = max(block_size, block_average(a[:, k], min_blocks=8).block_size)
    nb = a.shape[0] // block_size
    return a[: nb * block_size].reshape(nb, block_size, a.shape[1]).mean(axis=1)


def bootstrap_distribution(blocks, pipeline: Callable, resamples: int = 100, rng=None,
                           min_blocks: int = 8):
    """Pointwise standard deviation of ``pipeline(mean of resampled blocks)``.

    ``pipeline`` maps a coefficient vector to a dict of arrays (for example
    ``{"ntilde": ..., "np": ...}``); the return value is a dict with the same
    keys holding the standard deviations.
    """
    blocks = np.asarray(blocks, dtype=float)
    if blocks.shape[0] < min_blocks:
        raise ValueError(f"bootstrap needs at least {min_blocks} blocks, got {blocks.shape[0]}")
    rng = np.random.default_rng(rng)
    nb = blocks.shape[0]
    outputs: dict[str, list] = {}
    for _ in range(resamples):
        pick = rng.integers(0, nb, size=nb)
        result = pipeline(blocks[pick].mean(axis=0))
        for key, value in result.items():
            outputs.setdefault(key, []).append(np.asarray(value, dtype=float))
    return {key: np.std(np.stack(vals), axis=0, ddof=1) for key, vals in outputs.items()}


def has_significant_minimum(dist: DistributionResult, nsigma: float = 3.0, pmin: float = 0.0):
    """Whether ``n(p)`` has an interior local minimum deeper than ``nsigma`` errors.

    A minimum at index ``i`` counts when, for some maximum at larger ``p``, the
    rise exceeds ``nsigma`` times the combined error of the two points.
    Returns ``(found, details)``.
    """
    p, v, e = dist.grid, dist.values, dist.errors
    sel = p >= pmin
    p, v, e = p[sel], v[sel], e[sel]
    best = None
    for i in range(1, len(v) - 1):
        if v[i] <= v[i - 1] and v[i] < v[i + 1]:
            j = i + int(np.argmax(v[i:]))
            rise = v[j] - v[i]
            sig = np.hypot(e[i], e[j])
            score = np.inf if sig == 0 and rise > 0 else (rise / sig if sig > 0 else 0.0)
            if best is None or score > best["score"]:
                best = {"p_min": p[i], "p_max": p[j], "rise": rise, "sigma": sig, "score": score}
    if best is None:
        return False, None
    return bool(best["score"] > nsigma), best

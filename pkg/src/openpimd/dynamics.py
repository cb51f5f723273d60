"""Time integration of the open-path ring polymer.

One step is the symmetric splitting

    thermostat(dt/2) -> kick(dt/2) -> exact harmonic flow(dt) -> kick(dt/2)
    -> thermostat(dt/2)

followed by centre-of-mass velocity removal and the reflective wall on ``x``.
The harmonic flow covers the ring springs (in free-ring normal modes) and the
``m_A x^2 / (2 beta^2)`` term, both solved in closed form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import fft as sp_fft
from scipy.linalg import expm

from .pathcore import (
    PathState,
    SystemSpec,
    physical_gradient,
)
from .potentials import ConfigurationError, PotentialModel

log = logging.getLogger(__name__)


class TrajectoryDivergedError(RuntimeError):
    """Non-finite forces or positions; ``state`` holds the offending snapshot."""

    def __init__(self, message, state=None, step=None):
        super().__init__(message)
        self.state = state
        self.step = step


# ---------------------------------------------------------------- normal modes


class NormalModes:
    """Real orthogonal free-ring normal-mode transform for ``nbeads`` beads.

    Column ``k`` of :attr:`matrix` is ``cos(2 pi i k / l)`` for ``k < l/2``, the
    alternating mode for ``k = l/2`` and ``sin`` for ``k > l/2``, all normalised.
    The transforms themselves go through a real FFT.
    """

    def __init__(self, nbeads: int):
        if nbeads < 1:
            raise ConfigurationError("need at least one bead")
        self.nbeads = nbeads
        # mode k has frequency 2 omega_l sin(pi k / l)
        self.frequency_factors = 2.0 * np.sin(np.pi * np.arange(nbeads) / nbeads)
        self._half = (nbeads - 1) // 2
        self._matrix = None

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            l = self.nbeads
            ang = 2.0 * np.pi * np.outer(np.arange(l), np.arange(l)) / l
            c = np.sqrt(2.0 / l) * np.where(2 * np.arange(l) < l, np.cos(ang), np.sin(ang))
            c[:, 0] = 1.0 / np.sqrt(l)
            if l % 2 == 0:
                c[:, l // 2] = (-1.0) ** np.arange(l) / np.sqrt(l)
            self._matrix = c
        return self._matrix

    def to_nm(self, a: np.ndarray, axis: int) -> np.ndarray:
        l, h = self.nbeads, self._half
        a = np.moveaxis(np.asarray(a, dtype=float), axis, -1)
        f = sp_fft.rfft(a, axis=-1)
        out = np.empty(a.shape)
        out[..., 0] = f[..., 0].real / np.sqrt(l)
        if h:
            out[..., 1:h + 1] = np.sqrt(2.0 / l) * f[..., 1:h + 1].real
            out[..., l - h:] = np.sqrt(2.0 / l) * f[..., h:0:-1].imag
        if l % 2 == 0:
            out[..., l // 2] = f[..., l // 2].real / np.sqrt(l)
        return np.moveaxis(out, -1, axis)

    def from_nm(self, a: np.ndarray, axis: int) -> np.ndarray:
        l, h = self.nbeads, self._half
        a = np.moveaxis(np.asarray(a, dtype=float), axis, -1)
        f = np.zeros(a.shape[:-1] + (l // 2 + 1,), dtype=complex)
        f[..., 0] = a[..., 0] * np.sqrt(l)
        if h:
            f[..., 1:h + 1] = np.sqrt(0.5 * l) * (a[..., 1:h + 1] + 1j * a[..., l - h:][..., ::-1])
        if l % 2 == 0:
            f[..., l // 2] = a[..., l // 2] * np.sqrt(l)
        return np.moveaxis(sp_fft.irfft(f, n=l, axis=-1), -1, axis)


def _rotation(omega: np.ndarray, mass: np.ndarray, dt: float):
    """Coefficients of the exact harmonic map; zero frequency means free drift."""
    omega = np.asarray(omega, dtype=float)
    mass = np.broadcast_to(np.asarray(mass, dtype=float), omega.shape)
    c = np.cos(omega * dt)
    s = np.sin(omega * dt)
    safe = np.where(omega > 0, omega, 1.0)
    q_from_p = np.where(omega > 0, s / (mass * safe), dt / mass)
    p_from_q = np.where(omega > 0, -mass * safe * s, 0.0)
    return c, q_from_p, p_from_q


class HarmonicPropagator:
    """Exact flow of springs + ``x`` quadratic term + kinetic energy over ``dt``."""

    def __init__(self, system: SystemSpec, dt: float, modes: NormalModes | None = None):
        self.system = system
        self.dt = dt
        self.modes = modes or NormalModes(system.nbeads)
        wk = system.omega_l * self.modes.frequency_factors
        m = np.asarray(system.masses)
        # shapes broadcast against (N, l, d) and (M, l)
        self.bead = _rotation(wk[None, :, None] * np.ones((len(m), 1, 1)), m[:, None, None], dt)
        if system.nbath:
            mb = np.asarray(system.bath_masses)
            self.bath = _rotation(wk[None, :] * np.ones((len(mb), 1)), mb[:, None], dt)
        else:
            self.bath = None
        self.omega_x = np.sqrt(system.mass_x / system.x_md_mass) / system.beta
        self.xmap = _rotation(np.array(self.omega_x), np.array(system.x_md_mass), dt)

    def step_nm(self, qn, pn, qsn, psn, x, px):
        """Same flow on normal-mode arrays, updated in place."""
        c, qp, pq = self.bead
        q = qn.copy()
        qn *= c
        qn += qp * pn
        pn *= c
        pn += pq * q
        if self.bath is not None:
            c, qp, pq = self.bath
            q = qsn.copy()
            qsn *= c
            qsn += qp * psn
            psn *= c
            psn += pq * q
        c, qp, pq = self.xmap
        x0 = x.copy()
        x *= c
        x += qp * px
        px *= c
        px += pq * x0

    def step(self, state: PathState) -> PathState:
        nm = self.modes
        qn, pn = nm.to_nm(state.r, -2), nm.to_nm(state.p, -2)
        qsn, psn = nm.to_nm(state.s, -1), nm.to_nm(state.ps, -1)
        self.step_nm(qn, pn, qsn, psn, state.x, state.px)
        state.r[...] = nm.from_nm(qn, -2)
        state.p[...] = nm.from_nm(pn, -2)
        state.s[...] = nm.from_nm(qsn, -1)
        state.ps[...] = nm.from_nm(psn, -1)
        return state


def nm_exact_step(state: PathState, system: SystemSpec, dt: float) -> PathState:
    """Evolve ``state`` in place by ``dt`` under the quadratic part of H."""
    return HarmonicPropagator(system, dt).step(state)


# ---------------------------------------------------------------- random numbers


def standard_normal(rng, shape) -> np.ndarray:
    """Normal deviates; ``rng`` may be one Generator or one per walker (axis 0)."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    if not shape:
        raise ConfigurationError("per-walker generators need a walker axis")
    rngs = list(rng)
    if shape[0] != len(rngs):
        raise ConfigurationError(f"{len(rngs)} generators for {shape[0]} walkers")
    return np.stack([g.standard_normal(shape[1:]) for g in rngs])


class NoiseStream:
    """Pre-drawn normal deviates, ``chunk`` steps at a time.

    Each walker's generator supplies its own rows, so a walker's trajectory
    does not depend on how many other walkers share the batch.  Unused
    deviates are dropped when the stream is discarded, so restarts reproduce a
    run only when they resume at the same ``run`` boundaries.
    """

    def __init__(self, rng, batch_shape, size: int, chunk: int = 128):
        self.rng = rng
        self.batch_shape = tuple(batch_shape)
        self.size = size
        self.chunk = chunk
        self._buf = None
        self._pos = 0

    def _refill(self, n):
        if isinstance(self.rng, np.random.Generator):
            self._buf = self.rng.standard_normal((n,) + self.batch_shape + (self.size,))
        else:
            if not self.batch_shape:
                raise ConfigurationError("per-walker generators need a walker axis")
            rngs = list(self.rng)
            if len(rngs) != self.batch_shape[0]:
                raise ConfigurationError(f"{len(rngs)} generators for {self.batch_shape[0]} walkers")
            rest = self.batch_shape[1:]
            self._buf = np.stack([g.standard_normal((n,) + rest + (self.size,)) for g in rngs], axis=1)
        self._pos = 0

    def next(self, remaining: int) -> np.ndarray:
        if self._buf is None or self._pos == self._buf.shape[0]:
            self._refill(max(1, min(self.chunk, remaining)))
        out = self._buf[self._pos]
        self._pos += 1
        return out


def _unpack(noise, shapes):
    """Split the last axis of ``noise`` into consecutive blocks of the given shapes."""
    batch = noise.shape[:-1]
    out, i = [], 0
    for shape in shapes:
        n = int(np.prod(shape, dtype=int))
        out.append(noise[..., i:i + n].reshape(batch + tuple(shape)))
        i += n
    return out


# ---------------------------------------------------------------- GLE


@dataclass
class GLESpec:
    """Drift matrix ``A`` and stationary covariance ``C`` in mass-scaled units.

    ``C`` defaults to ``(1/beta) * I``; both are ``(s+1) x (s+1)`` with row/column
    0 the physical momentum and the rest auxiliary momenta.
    """

    A: np.ndarray
    C: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ConfigurationError("GLE drift matrix must be square")
        sym = 0.5 * (self.A + self.A.T)
        if np.min(np.linalg.eigvalsh(sym)) < -1e-12 * max(1.0, np.max(np.abs(sym))):
            raise ConfigurationError("GLE drift matrix has a negative symmetric part")
        if self.C is not None:
            self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
            if self.C.shape != (n, n) or not np.allclose(self.C, self.C.T):
                raise ConfigurationError("GLE covariance must be symmetric and match A")
            if np.min(np.linalg.eigvalsh(self.C)) <= 0:
                raise ConfigurationError("GLE covariance must be positive definite")

    @property
    def n_aux(self) -> int:
        return self.A.shape[0] - 1

    def covariance(self, beta: float) -> np.ndarray:
        if self.C is not None:
            return self.C
        return np.eye(self.A.shape[0]) / beta


def load_gle_matrices(path) -> GLESpec:
    """Read ``s``, then ``(s+1)^2`` drift entries, then optionally ``(s+1)^2`` covariance entries."""
    with open(path) as fh:
        tokens = fh.read().split()
    if not tokens:
        raise ConfigurationError(f"{path}: empty GLE file")
    s = int(tokens[0])
    n = (s + 1) ** 2
    values = np.array([float(t) for t in tokens[1:]])
    if values.size not in (n, 2 * n):
        raise ConfigurationError(f"{path}: expected {n} or {2 * n} matrix entries, got {values.size}")
    A = values[:n].reshape(s + 1, s + 1)
    C = values[n:].reshape(s + 1, s + 1) if values.size == 2 * n else None
    return GLESpec(A, C)


def gle_propagator(spec: GLESpec, dt: float, beta: float, tol: float = 1e-12):
    """``T = exp(-A dt)`` and ``S`` with ``S S^T = C - T C T^T``."""
    T = expm(-spec.A * dt)
    C = spec.covariance(beta)
    cov = C - T @ C @ T.T
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    scale = max(1.0, float(np.max(np.abs(C))))
    if np.min(w) < -tol * scale * 1e3:
        raise ConfigurationError(f"GLE fluctuation covariance not positive semidefinite (min eigenvalue {np.min(w):.3g})")
    w = np.clip(w, 0.0, None)
    S = v * np.sqrt(w)
    return T, S


def gle_step(momenta, aux, dt, spec: GLESpec, rng, beta: float = 1.0, mass=1.0):
    """Exact Ornstein-Uhlenbeck update of momenta and their auxiliary partners.

    ``momenta`` has any shape ``K``; ``aux`` has shape ``(s,) + K``.  The drift
    acts on mass-scaled momenta ``p / sqrt(m)``.
    """
    T, S = gle_propagator(spec, dt, beta)
    return _gle_apply(T, S, np.asarray(momenta, dtype=float), np.asarray(aux, dtype=float), rng, mass)


def _gle_apply(T, S, momenta, aux, rng, mass, noise=None):
    sm = np.sqrt(mass)
    stacked = np.concatenate([(momenta / sm)[None], aux], axis=0)
    if noise is None:
        noise = rng.standard_normal(stacked.shape)
    new = np.tensordot(T, stacked, axes=1) + np.tensordot(S, noise, axes=1)
    return new[0] * sm, new[1:]


# ---------------------------------------------------------------- thermostats


@dataclass
class ThermostatConfig:
    """``kind``: ``"pile"`` (white-noise Langevin per normal mode), ``"gle"`` or ``"none"``."""

    kind: str = "pile"
    gamma0: float = 1e-3
    gamma_x: float = 1e-3
    gle: GLESpec | None = None


class _Thermostat:
    """Shared plumbing: thermostats act on normal-mode momenta and consume
    ``noise_size`` deviates per walker per application."""

    noise_size = 0

    def __init__(self, system: SystemSpec, modes: NormalModes):
        self.system = system
        self.modes = modes

    def apply_nm(self, pn, psn, px, noise):
        pass

    def apply(self, state: PathState, rng):
        """Thermostat a bead-space state (transforms in and out)."""
        nm = self.modes
        pn, psn = nm.to_nm(state.p, -2), nm.to_nm(state.ps, -1)
        noise = standard_normal(rng, state.batch_shape + (self.noise_size,))
        self.apply_nm(pn, psn, state.px, noise)
        state.p[...] = nm.from_nm(pn, -2)
        state.ps[...] = nm.from_nm(psn, -1)
        return state

    def get_state(self):
        return {}

    def set_state(self, data):
        pass


class NullThermostat(_Thermostat):
    def __init__(self, system=None, modes=None):
        super().__init__(system, modes)

    def apply(self, state, rng):
        return state


class PileThermostat(_Thermostat):
    """Langevin friction in free-ring normal modes, ``gamma_k = 2 omega_k`` (``gamma0`` for the centroid)."""

    def __init__(self, system: SystemSpec, dt_half: float, config: ThermostatConfig,
                 modes: NormalModes):
        super().__init__(system, modes)
        gk = 2.0 * system.omega_l * modes.frequency_factors
        gk[0] = config.gamma0
        c1 = np.exp(-gk * dt_half)
        c2 = np.sqrt(1.0 - c1 * c1)
        m = np.asarray(system.masses)
        self.bead = (c1[None, :, None], (c2[None, :, None] * np.sqrt(m / system.beta)[:, None, None]))
        mb = np.asarray(system.bath_masses, dtype=float)
        self.bath = (c1[None, :], c2[None, :] * np.sqrt(mb / system.beta)[:, None])
        cx = np.exp(-config.gamma_x * dt_half)
        self.x = (cx, np.sqrt((1.0 - cx * cx) * system.x_md_mass / system.beta))
        self.shapes = [(system.natoms, system.nbeads, system.ndim), (system.nbath, system.nbeads), ()]
        self.noise_size = sum(int(np.prod(s, dtype=int)) for s in self.shapes)

    def apply_nm(self, pn, psn, px, noise):
        nr, ns, nx = _unpack(noise, self.shapes)
        c1, c2 = self.bead
        pn *= c1
        pn += c2 * nr
        if self.system.nbath:
            c1, c2 = self.bath
            psn *= c1
            psn += c2 * ns
        cx, sx = self.x
        px *= cx
        px += sx * nx


class GLEThermostat(_Thermostat):
    """The same colored-noise matrices applied to every normal mode, the bath and ``x``."""

    def __init__(self, system: SystemSpec, dt_half: float, spec: GLESpec, modes: NormalModes,
                 batch_shape=()):
        super().__init__(system, modes)
        self.spec = spec
        self.T, self.S = gle_propagator(spec, dt_half, system.beta)
        s = spec.n_aux
        b = tuple(batch_shape)
        self.aux = {
            "r": np.zeros((s,) + b + (system.natoms, system.nbeads, system.ndim)),
            "s": np.zeros((s,) + b + (system.nbath, system.nbeads)),
            "x": np.zeros((s,) + b),
        }
        k = s + 1
        self.shapes = [(k, system.natoms, system.nbeads, system.ndim), (k, system.nbath, system.nbeads), (k,)]
        self.noise_size = sum(int(np.prod(sh, dtype=int)) for sh in self.shapes)

    def apply_nm(self, pn, psn, px, noise):
        blocks = [np.moveaxis(b, -len(sh), 0) for b, sh in zip(_unpack(noise, self.shapes), self.shapes)]
        m = np.asarray(self.system.masses)[:, None, None]
        new, self.aux["r"] = _gle_apply(self.T, self.S, pn, self.aux["r"], None, m, blocks[0])
        pn[...] = new
        if self.system.nbath:
            mb = np.asarray(self.system.bath_masses)[:, None]
            new, self.aux["s"] = _gle_apply(self.T, self.S, psn, self.aux["s"], None, mb, blocks[1])
            psn[...] = new
        new, self.aux["x"] = _gle_apply(self.T, self.S, np.asarray(px, dtype=float), self.aux["x"], None,
                                        self.system.x_md_mass, blocks[2])
        px[...] = new

    def get_state(self):
        return {k: v.copy() for k, v in self.aux.items()}

    def set_state(self, data):
        for k in self.aux:
            if k in data:
                self.aux[k] = np.array(data[k], dtype=float)


def make_thermostat(config: ThermostatConfig, system: SystemSpec, dt: float, modes: NormalModes,
                    batch_shape=()):
    kind = config.kind.lower()
    if kind == "none":
        return NullThermostat(system, modes)
    if kind == "pile":
        return PileThermostat(system, 0.5 * dt, config, modes)
    if kind == "gle":
        if config.gle is None:
            raise ConfigurationError("GLE thermostat requested without matrices")
        return GLEThermostat(system, 0.5 * dt, config.gle, modes, batch_shape)
    raise ConfigurationError(f"unknown thermostat {config.kind!r}")


# ---------------------------------------------------------------- constraints


def remove_com_velocity(state: PathState, system: SystemSpec) -> PathState:
    """Zero the total bead momentum (mass-weighted); ``p_x`` and bath momenta are untouched."""
    m = np.asarray(system.masses)
    total = np.sum(state.p, axis=(-3, -2))
    state.p -= (total / (system.nbeads * m.sum()))[..., None, None, :] * m[:, None, None]
    return state


def reflect_wall(x, px, bound: float):
    """Mirror ``x`` back into ``[-bound, bound]``, flipping ``px`` at each bounce."""
    x = np.array(x, dtype=float)
    px = np.array(px, dtype=float)
    while True:
        hi = x > bound
        lo = x < -bound
        if not (np.any(hi) or np.any(lo)):
            break
        x = np.where(hi, 2 * bound - x, x)
        x = np.where(lo, -2 * bound - x, x)
        px = np.where(hi | lo, -px, px)
    return x[()] if x.ndim == 0 else x, px[()] if px.ndim == 0 else px


# ---------------------------------------------------------------- integrator


@dataclass
class IntegratorConfig:
    dt: float = 10.0
    wall: float | None = 3.0
    com_removal: bool | None = None
    thermostat: ThermostatConfig = field(default_factory=ThermostatConfig)

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigurationError("dt must be positive")
        if self.wall is not None and self.wall <= 0:
            raise ConfigurationError("wall half-width must be positive")


class Integrator:
    """Reusable stepper for one system/model/bias combination.

    ``com_removal=None`` enables centre-of-mass removal only for
    translation-invariant models (a particle in an external potential has no
    conserved momentum).
    """

    def __init__(self, system: SystemSpec, model: PotentialModel, config: IntegratorConfig,
                 bias=None, batch_shape=()):
        self.system = system
        self.model = model
        self.config = config
        self.bias = bias
        self.modes = NormalModes(system.nbeads)
        self.harmonic = HarmonicPropagator(system, config.dt, self.modes)
        self.thermostat = make_thermostat(config.thermostat, system, config.dt, self.modes, batch_shape)
        com = config.com_removal
        self.com_removal = model.translation_invariant if com is None else com

    def gradient(self, state: PathState):
        grad = physical_gradient(state, self.system, self.model, self.bias)
        if not grad.is_finite():
            raise TrajectoryDivergedError("non-finite force", state.copy())
        return grad

    def run(self, state: PathState, nsteps: int, rng, observer=None) -> PathState:
        """Advance ``nsteps`` steps in place; ``observer(state, step)`` runs after each step.

        Positions, ``x`` and ``p_x`` are current when the observer is called;
        bead and bath momenta are written back only when the call returns.
        """
        if nsteps <= 0:
            return state
        nm = self.modes
        half = 0.5 * self.config.dt
        thermo = self.thermostat
        k = thermo.noise_size
        noise = NoiseStream(rng, state.batch_shape, 2 * k) if k else None
        m = np.asarray(self.system.masses)
        com_w = np.sqrt(self.system.nbeads) * m / (self.system.nbeads * m.sum())
        qn, pn = nm.to_nm(state.r, -2), nm.to_nm(state.p, -2)
        qsn, psn = nm.to_nm(state.s, -1), nm.to_nm(state.ps, -1)
        x, px = state.x, state.px

        def forces():
            g = self.gradient(state)
            return nm.to_nm(g.r, -2), nm.to_nm(g.s, -1), g.x

        gn, gsn, gx = forces()
        for step in range(nsteps):
            xi = noise.next(nsteps - step) if noise is not None else None
            if k:
                thermo.apply_nm(pn, psn, px, xi[..., :k])
            pn -= half * gn
            psn -= half * gsn
            px -= half * gx
            self.harmonic.step_nm(qn, pn, qsn, psn, x, px)
            state.r[...] = nm.from_nm(qn, -2)
            if self.system.nbath:
                state.s[...] = nm.from_nm(qsn, -1)
            gn, gsn, gx = forces()
            pn -= half * gn
            psn -= half * gsn
            px -= half * gx
            if k:
                thermo.apply_nm(pn, psn, px, xi[..., k:])
            if self.com_removal:
                total = np.sqrt(self.system.nbeads) * np.sum(pn[..., 0, :], axis=-2)
                pn[..., 0, :] -= total[..., None, :] * com_w[:, None]
            if self.config.wall is not None:
                w = self.config.wall
                if np.any(np.abs(x) > w):
                    new_x, new_px = reflect_wall(x, px, w)
                    x[...] = new_x
                    px[...] = new_px
                    gn, gsn, gx = forces()
            if not np.all(np.isfinite(x)) or not np.all(np.isfinite(qn)):
                state.p[...] = nm.from_nm(pn, -2)
                raise TrajectoryDivergedError("non-finite positions", state.copy(), step)
            if observer is not None:
                observer(state, step)
        state.p[...] = nm.from_nm(pn, -2)
        state.ps[...] = nm.from_nm(psn, -1)
        return state

    def step(self, state: PathState, rng) -> PathState:
        return self.run(state, 1, rng)


def md_step(state: PathState, system: SystemSpec, model: PotentialModel, config: IntegratorConfig,
            rng, bias=None) -> PathState:
    """One full step; builds a throwaway :class:`Integrator` (use the class in loops)."""
    return Integrator(system, model, config, bias, state.batch_shape).step(state, rng)

"""Open-path ring polymer for the directional momentum distribution.

Atom A's path is opened along the unit vector from C to B (taken at bead 0) by
a scalar displacement ``x``; after the shift ``r_A^i -> r~_A^i - x y_i e``
with ``y_i = i/l - 1/2`` every path is a closed ring again and ``x`` becomes an
ordinary degree of freedom with the extra Gaussian weight
``m_A x^2 / (2 beta)``.

Arrays may carry any number of leading (walker) axes: bead positions have
shape ``(..., N, l, d)``, bath beads ``(..., M, l)`` and ``x`` shape ``(...)``.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .potentials import ConfigurationError, PotentialModel

STATE_FORMAT_VERSION = 1


class GeometryError(RuntimeError):
    """B and C bead-0 positions (nearly) coincide, so the axis is undefined."""


@dataclass(frozen=True)
class SystemSpec:
    """Static description of the path-integral system (atomic units, hbar = 1)."""

    masses: tuple
    nbeads: int
    beta: float
    tagged: int = 0
    anchors: tuple | None = (1, 2)
    ndim: int = 3
    bath_masses: tuple = ()
    d_min: float = 1e-6
    x_mass: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "masses", tuple(float(m) for m in np.atleast_1d(self.masses)))
        object.__setattr__(self, "bath_masses", tuple(float(m) for m in np.atleast_1d(self.bath_masses)))
        if self.nbeads < 2:
            raise ConfigurationError("need at least two beads")
        if self.beta <= 0:
            raise ConfigurationError("beta must be positive")
        if min(self.masses) <= 0 or (self.bath_masses and min(self.bath_masses) <= 0):
            raise ConfigurationError("masses must be positive")
        if self.x_mass is not None and self.x_mass <= 0:
            raise ConfigurationError("x_mass must be positive")
        n = len(self.masses)
        if not 0 <= self.tagged < n:
            raise ConfigurationError("tagged atom index out of range")
        if self.anchors is not None:
            b, c = self.anchors
            if len({self.tagged, b, c}) != 3 or not (0 <= b < n and 0 <= c < n):
                raise ConfigurationError("A, B, C must be distinct atom indices")
            if self.ndim != 3:
                raise ConfigurationError("anchored axis needs three-dimensional atoms")
        elif self.ndim != 1:
            raise ConfigurationError("without anchors the system must be one-dimensional")

    @property
    def natoms(self) -> int:
        return len(self.masses)

    @property
    def nbath(self) -> int:
        return len(self.bath_masses)

    @property
    def omega_l(self) -> float:
        return np.sqrt(self.nbeads) / self.beta

    @property
    def mass_x(self) -> float:
        """Physical mass of the tagged atom, entering the ``x**2`` term."""
        return self.masses[self.tagged]

    @property
    def x_md_mass(self) -> float:
        """Fictitious mass of ``x`` in the dynamics (defaults to the physical one)."""
        return self.mass_x if self.x_mass is None else float(self.x_mass)

    @property
    def y(self) -> np.ndarray:
        """Shift fractions ``y_i = i/l - 1/2`` for ``i = 0..l``."""
        return np.arange(self.nbeads + 1) / self.nbeads - 0.5

    @property
    def weights(self) -> np.ndarray:
        """Potential weights of the ``l + 1`` shifted configurations."""
        w = np.full(self.nbeads + 1, 1.0 / self.nbeads)
        w[0] = w[-1] = 0.5 / self.nbeads
        return w

    @property
    def position_dof(self) -> int:
        return self.natoms * self.nbeads * self.ndim + self.nbath * self.nbeads + 1

    def to_dict(self) -> dict:
        return {
            "masses": list(self.masses),
            "nbeads": self.nbeads,
            "beta": self.beta,
            "tagged": self.tagged,
            "anchors": None if self.anchors is None else list(self.anchors),
            "ndim": self.ndim,
            "bath_masses": list(self.bath_masses),
            "d_min": self.d_min,
            "x_mass": self.x_mass,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SystemSpec":
        d = dict(d)
        if d.get("anchors") is not None:
            d["anchors"] = tuple(d["anchors"])
        return cls(**d)


@dataclass
class PathState:
    """Positions and MD momenta of one trajectory (or a stack of walkers)."""

    r: np.ndarray
    p: np.ndarray
    x: np.ndarray
    px: np.ndarray
    s: np.ndarray
    ps: np.ndarray

    @property
    def batch_shape(self) -> tuple:
        return self.x.shape

    def copy(self) -> "PathState":
        return PathState(*(np.array(a, copy=True) for a in self.arrays()))

    def arrays(self):
        return (self.r, self.p, self.x, self.px, self.s, self.ps)

    def walker(self, k) -> "PathState":
        return PathState(*(np.array(a[k], copy=True) for a in self.arrays()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


_FIELDS = ("r", "p", "x", "px", "s", "ps")


def zero_state(system: SystemSpec, batch_shape=()) -> PathState:
    batch_shape = tuple(np.atleast_1d(batch_shape)) if batch_shape != () else ()
    bead = batch_shape + (system.natoms, system.nbeads, system.ndim)
    bath = batch_shape + (system.nbath, system.nbeads)
    return PathState(
        np.zeros(bead), np.zeros(bead), np.zeros(batch_shape), np.zeros(batch_shape),
        np.zeros(bath), np.zeros(bath),
    )


def initial_state(system: SystemSpec, coordinates, nwalkers: int | None = None,
                  x: float = 0.0) -> PathState:
    """Collapsed rings at ``coordinates`` (flat model coordinate vector)."""
    shape = () if nwalkers is None else (nwalkers,)
    state = zero_state(system, shape)
    coordinates = np.asarray(coordinates, dtype=float)
    nat = system.natoms * system.ndim
    atoms = coordinates[:nat].reshape(system.natoms, 1, system.ndim)
    state.r[...] = atoms
    state.s[...] = coordinates[nat:][:, None]
    state.x[...] = x
    return state


def save_state(target, state: PathState, system: SystemSpec | None = None) -> None:
    """Write a versioned ``.npz`` snapshot; round-trips exactly."""
    payload = {name: arr for name, arr in zip(_FIELDS, state.arrays())}
    meta = {"format_version": STATE_FORMAT_VERSION}
    if system is not None:
        meta["system"] = system.to_dict()
    payload["meta"] = np.array(json.dumps(meta))
    np.savez(target, **payload)


def load_state(source) -> tuple[PathState, SystemSpec | None]:
    with np.load(source, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format_version") != STATE_FORMAT_VERSION:
            raise ConfigurationError(f"unsupported state format {meta.get('format_version')}")
        state = PathState(*(np.array(data[name]) for name in _FIELDS))
    system = SystemSpec.from_dict(meta["system"]) if "system" in meta else None
    return state, system


def state_to_bytes(state: PathState, system: SystemSpec | None = None) -> bytes:
    buf = io.BytesIO()
    save_state(buf, state, system)
    return buf.getvalue()


@dataclass
class BCGeometry:
    """Unit vector from C to B at bead 0 and its Jacobians."""

    e: np.ndarray
    d: np.ndarray
    jac_b: np.ndarray
    jac_c: np.ndarray

    def apply_jacobian(self, g_e: np.ndarray) -> np.ndarray:
        """``J_B^T g_e``; the C contribution is the negative of this."""
        proj = g_e - np.sum(g_e * self.e, axis=-1)[..., None] * self.e
        return proj / self.d[..., None]


def bc_geometry(state: PathState, system: SystemSpec) -> BCGeometry:
    if system.anchors is None:
        shape = state.x.shape
        e = np.ones(shape + (1,))
        zeros = np.zeros(shape + (1, 1))
        return BCGeometry(e, np.ones(shape), zeros, zeros)
    b, c = system.anchors
    u = state.r[..., b, 0, :] - state.r[..., c, 0, :]
    d = np.linalg.norm(u, axis=-1)
    if np.any(d <= system.d_min):
        raise GeometryError(f"B-C separation {np.min(d):.3g} bohr below d_min = {system.d_min}")
    e = u / d[..., None]
    proj = np.eye(3) - e[..., :, None] * e[..., None, :]
    jac = proj / d[..., None, None]
    return BCGeometry(e, d, jac, -jac)


def shifted_bead(state: PathState, system: SystemSpec, i: int) -> np.ndarray:
    """Argument of the potential for atom A at bead ``i`` (``i = l`` means bead 0, ``y = +1/2``)."""
    if not 0 <= i <= system.nbeads:
        raise IndexError(f"bead index {i} outside 0..{system.nbeads}")
    geo = bc_geometry(state, system)
    y = i / system.nbeads - 0.5
    bead = state.r[..., system.tagged, i % system.nbeads, :]
    return bead - (state.x * y)[..., None] * geo.e


def standard_end_to_end(r_first, r_last) -> np.ndarray:
    """End-to-end vector ``r^0 - r^l`` of an ordinary open path."""
    return np.asarray(r_first, dtype=float) - np.asarray(r_last, dtype=float)


@dataclass
class PathGradient:
    """Gradient of an energy with respect to every position degree of freedom."""

    r: np.ndarray
    x: np.ndarray
    s: np.ndarray

    def __iadd__(self, other: "PathGradient"):
        self.r += other.r
        self.x += other.x
        self.s += other.s
        return self

    def scaled(self, factor: float) -> "PathGradient":
        return PathGradient(self.r * factor, self.x * factor, self.s * factor)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.r)) and np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.s)))


def zero_gradient(state: PathState) -> PathGradient:
    return PathGradient(np.zeros_like(state.r), np.zeros_like(state.x), np.zeros_like(state.s))


def configurations(state: PathState, system: SystemSpec, geo: BCGeometry | None = None) -> np.ndarray:
    """The ``l + 1`` flat model configurations entering the potential term.

    Row ``i < l`` is bead ``i`` with A shifted by ``-x y_i e``; row ``l`` is
    bead 0 again with ``y_l = +1/2``.  Shape ``(..., l + 1, D)``.
    """
    if geo is None:
        geo = bc_geometry(state, system)
    batch = state.x.shape
    l, n, d = system.nbeads, system.natoms, system.ndim
    atoms = np.swapaxes(state.r, -3, -2).reshape(batch + (l, n * d))
    parts = [atoms]
    if system.nbath:
        parts.append(np.swapaxes(state.s, -2, -1))
    flat = np.concatenate(parts, axis=-1) if len(parts) > 1 else atoms
    conf = np.concatenate([flat, flat[..., :1, :]], axis=-2)
    a = system.tagged * d
    shift = (state.x[..., None] * system.y)[..., :, None] * geo.e[..., None, :]
    conf[..., :, a:a + d] -= shift
    return conf


def potential_energy(state: PathState, system: SystemSpec, model: PotentialModel) -> np.ndarray:
    conf = configurations(state, system)
    return np.sum(model.energy(conf) * system.weights, axis=-1)


def potential_gradient(state: PathState, system: SystemSpec, model: PotentialModel,
                       geo: BCGeometry | None = None) -> tuple[np.ndarray, PathGradient]:
    """Weighted potential term and its exact gradient (chain rule through the shift and axis)."""
    if geo is None:
        geo = bc_geometry(state, system)
    conf = configurations(state, system, geo)
    energy, grad = model.energy_and_gradient(conf)
    w = system.weights
    energy = np.sum(energy * w, axis=-1)
    grad = grad * w[:, None]
    batch = state.x.shape
    l, n, d = system.nbeads, system.natoms, system.ndim
    a = system.tagged * d
    g_a = grad[..., :, a:a + d]
    # d/dx of -x y_i e and d/de of the same shift
    weighted = np.sum(g_a * system.y[:, None], axis=-2)
    g_x = -np.sum(weighted * geo.e, axis=-1)
    g_e = -state.x[..., None] * weighted
    folded = grad[..., :l, :].copy()
    folded[..., 0, :] += grad[..., l, :]
    g_r = np.swapaxes(folded[..., : n * d].reshape(batch + (l, n, d)), -3, -2).copy()
    if system.anchors is not None:
        b, c = system.anchors
        jg = geo.apply_jacobian(g_e)
        g_r[..., b, 0, :] += jg
        g_r[..., c, 0, :] -= jg
    g_s = np.swapaxes(folded[..., n * d:], -2, -1).copy() if system.nbath else np.zeros_like(state.s)
    return energy, PathGradient(g_r, g_x, g_s)


def spring_energy(state: PathState, system: SystemSpec) -> np.ndarray:
    w2 = system.omega_l**2
    m = np.asarray(system.masses)
    dr = state.r - np.roll(state.r, -1, axis=-2)
    e = 0.5 * w2 * np.sum(m[:, None] * np.sum(dr * dr, axis=-1), axis=(-2, -1))
    if system.nbath:
        mb = np.asarray(system.bath_masses)
        ds = state.s - np.roll(state.s, -1, axis=-1)
        e = e + 0.5 * w2 * np.sum(mb[:, None] * ds * ds, axis=(-2, -1))
    return e


def spring_gradient(state: PathState, system: SystemSpec) -> PathGradient:
    w2 = system.omega_l**2
    m = np.asarray(system.masses)[:, None, None]
    lap = 2 * state.r - np.roll(state.r, 1, axis=-2) - np.roll(state.r, -1, axis=-2)
    g_s = np.zeros_like(state.s)
    if system.nbath:
        mb = np.asarray(system.bath_masses)[:, None]
        g_s = w2 * mb * (2 * state.s - np.roll(state.s, 1, axis=-1) - np.roll(state.s, -1, axis=-1))
    return PathGradient(w2 * m * lap, np.zeros_like(state.x), g_s)


def x_quadratic_energy(state: PathState, system: SystemSpec) -> np.ndarray:
    return 0.5 * system.mass_x * state.x**2 / system.beta**2


def kinetic_energy(state: PathState, system: SystemSpec) -> np.ndarray:
    m = np.asarray(system.masses)[:, None, None]
    k = 0.5 * np.sum(state.p**2 / m, axis=(-3, -2, -1)) + 0.5 * state.px**2 / system.x_md_mass
    if system.nbath:
        mb = np.asarray(system.bath_masses)[:, None]
        k = k + 0.5 * np.sum(state.ps**2 / mb, axis=(-2, -1))
    return k


def hamiltonian_energy(state: PathState, system: SystemSpec, model: PotentialModel,
                       bias=None) -> np.ndarray:
    """Total conserved energy: springs + weighted potential + x term + kinetic (+ bias)."""
    total = (spring_energy(state, system) + potential_energy(state, system, model)
             + x_quadratic_energy(state, system) + kinetic_energy(state, system))
    if bias is not None:
        total = total + bias.energy(state, system)
    return total


def physical_gradient(state: PathState, system: SystemSpec, model: PotentialModel,
                      bias=None) -> PathGradient:
    """Gradient of the potential term plus bias (the part integrated by kicks)."""
    geo = bc_geometry(state, system)
    _, grad = potential_gradient(state, system, model, geo)
    if bias is not None:
        grad += bias.gradient(state, system, geo)
    return grad


def forces(state: PathState, system: SystemSpec, model: PotentialModel, bias=None,
           include_harmonic: bool = True) -> PathGradient:
    """Negative gradient of the position-dependent part of the Hamiltonian.

    With ``include_harmonic=False`` the spring and ``x**2`` terms are left out;
    those are integrated exactly in the normal-mode step.
    """
    grad = physical_gradient(state, system, model, bias)
    if include_harmonic:
        grad += spring_gradient(state, system)
        grad.x += system.mass_x * state.x / system.beta**2
    return grad.scaled(-1.0)

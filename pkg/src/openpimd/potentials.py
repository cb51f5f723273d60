"""Model potential-energy surfaces.

Every model maps a flat coordinate vector (Cartesian atom coordinates followed
by any scalar bath coordinates) to an energy in hartree, and returns the
analytic gradient in hartree/bohr.  Leading axes are treated as a batch, so a
whole ring polymer (or a stack of walkers) is evaluated in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

HYDROGEN_MASS = 1836.0
OXYGEN_MASS = 29156.9


class ConfigurationError(ValueError):
    """Raised for inconsistent model or run parameters."""


class PotentialModel:
    """Energy/gradient interface shared by all models.

    Subclasses set ``n_atoms``, ``ndim`` (spatial dimension of each atom),
    ``n_bath`` (number of scalar bath coordinates) and implement
    ``_energy`` / ``_gradient`` on arrays of shape ``(..., dimension)``.
    """

    n_atoms: int = 1
    ndim: int = 3
    n_bath: int = 0
    translation_invariant: bool = False

    @property
    def dimension(self) -> int:
        return self.n_atoms * self.ndim + self.n_bath

    def _check(self, positions) -> np.ndarray:
        positions = np.asarray(positions, dtype=float)
        if positions.ndim == 0 or positions.shape[-1] != self.dimension:
            raise ConfigurationError(
                f"{type(self).__name__} expects {self.dimension} coordinates, "
                f"got shape {positions.shape}"
            )
        return positions

    def energy(self, positions) -> np.ndarray:
        return self._energy(self._check(positions))

    def gradient(self, positions) -> np.ndarray:
        return self._gradient(self._check(positions))

    def energy_and_gradient(self, positions) -> tuple[np.ndarray, np.ndarray]:
        positions = self._check(positions)
        return self._energy(positions), self._gradient(positions)

    def parameters(self) -> dict:
        """Plain-dict description used for manifests and model hashes."""
        return {"kind": type(self).__name__}

    def _energy(self, positions):
        raise NotImplementedError

    def _gradient(self, positions):
        raise NotImplementedError


def grad_potential(model: PotentialModel, positions) -> np.ndarray:
    """Analytic gradient of ``model`` at ``positions``."""
    return model.gradient(positions)


def eval_double_well(q, v0=0.006, a=0.6, extension_range=(-2.0, 2.0)):
    """Quartic double well ``v0*((q/a)**2 - 1)**2`` with linear tails.

    Outside ``extension_range`` the potential continues along the tangent at
    the nearest endpoint, so value and slope are continuous there.
    """
    value, _ = _double_well(np.asarray(q, dtype=float), v0, a, extension_range)
    return value[()] if np.ndim(value) == 0 else value


def _quartic(q, v0, a):
    u = (q / a) ** 2 - 1.0
    return v0 * u * u, 4.0 * v0 * u * q / (a * a)


def _double_well(q, v0, a, extension_range):
    lo, hi = extension_range
    value, slope = _quartic(q, v0, a)
    v_hi, d_hi = _quartic(hi, v0, a)
    v_lo, d_lo = _quartic(lo, v0, a)
    above = q > hi
    below = q < lo
    value = np.where(above, v_hi + d_hi * (q - hi), value)
    value = np.where(below, v_lo + d_lo * (q - lo), value)
    slope = np.where(above, d_hi, slope)
    slope = np.where(below, d_lo, slope)
    return value, slope


@dataclass
class DoubleWell1D(PotentialModel):
    """One particle on a line in a symmetric quartic double well."""

    v0: float = 0.006
    a: float = 0.6
    extension_range: tuple[float, float] = (-2.0, 2.0)
    mass: float = HYDROGEN_MASS

    n_atoms = 1
    ndim = 1
    n_bath = 0

    def __post_init__(self):
        if self.v0 < 0 or self.a <= 0 or self.mass <= 0:
            raise ConfigurationError("double well needs v0 >= 0, a > 0, mass > 0")
        lo, hi = self.extension_range
        if not lo < hi:
            raise ConfigurationError("extension_range must be increasing")
        self.extension_range = (float(lo), float(hi))

    def value(self, q):
        return _double_well(np.asarray(q, dtype=float), self.v0, self.a, self.extension_range)[0]

    def derivative(self, q):
        return _double_well(np.asarray(q, dtype=float), self.v0, self.a, self.extension_range)[1]

    def _energy(self, positions):
        return self.value(positions[..., 0])

    def _gradient(self, positions):
        return self.derivative(positions)

    def parameters(self):
        return {
            "kind": "double_well",
            "v0": self.v0,
            "a": self.a,
            "extension_range": list(self.extension_range),
            "mass": self.mass,
        }


@dataclass
class Harmonic1D(PotentialModel):
    mass: float = 1.0
    omega: float = 1.0

    n_atoms = 1
    ndim = 1
    n_bath = 0

    def value(self, q):
        return 0.5 * self.mass * self.omega**2 * np.asarray(q, dtype=float) ** 2

    def derivative(self, q):
        return self.mass * self.omega**2 * np.asarray(q, dtype=float)

    def _energy(self, positions):
        return self.value(positions[..., 0])

    def _gradient(self, positions):
        return self.derivative(positions)

    def parameters(self):
        return {"kind": "harmonic", "mass": self.mass, "omega": self.omega}


class FreeParticle(PotentialModel):
    """V = 0 for ``n_atoms`` particles in ``ndim`` dimensions."""

    translation_invariant = True

    def __init__(self, n_atoms: int = 1, ndim: int = 1, mass: float = HYDROGEN_MASS):
        self.n_atoms = n_atoms
        self.ndim = ndim
        self.mass = mass

    def _energy(self, positions):
        return np.zeros(positions.shape[:-1])

    def _gradient(self, positions):
        return np.zeros_like(positions)

    def parameters(self):
        return {"kind": "free", "n_atoms": self.n_atoms, "ndim": self.ndim, "mass": self.mass}


@dataclass
class BathMode:
    """Harmonic bath oscillator coupled bilinearly to the tunnelling coordinate."""

    mass: float
    omega: float
    coupling: float


def default_bath(n_modes: int = 4, omega_min: float = 0.002, omega_max: float = 0.016,
                 mass: float = HYDROGEN_MASS, reorganization: float = 0.0035) -> list[BathMode]:
    """Log-spaced bath whose total counterterm stiffness equals ``reorganization``.

    The counterterm of mode j is ``c_j**2 / (m_j omega_j**2)``; couplings are
    split so every mode contributes the same share.
    """
    omegas = np.geomspace(omega_min, omega_max, n_modes)
    share = reorganization / n_modes
    return [BathMode(mass, float(w), float(np.sqrt(share * mass) * w)) for w in omegas]


@dataclass
class TriatomicBathModel(PotentialModel):
    """Atom A tunnelling between two heavy anchors B and C, plus a harmonic bath.

    Coordinates are ``[r_A, r_B, r_C, q_bath_1 .. q_bath_M]``.  With
    ``v = r_A - (r_B + r_C)/2``, ``e = (r_B - r_C)/|r_B - r_C|`` and ``q = v.e``
    the energy is

        V_dw(q) + k_perp/2 |v - q e|^2 + k_anchor/2 (|r_B - r_C| - d_BC)^2
        + sum_j m_j w_j^2/2 (q_j - c_j q/(m_j w_j^2))^2

    which depends on internal coordinates only (translation and rotation
    invariant).
    """

    m_A: float = HYDROGEN_MASS
    m_B: float = OXYGEN_MASS
    m_C: float = OXYGEN_MASS
    d_BC: float = 4.87
    k_anchor: float = 0.2
    v0: float = 0.006
    a: float = 0.6
    extension_range: tuple[float, float] = (-2.0, 2.0)
    k_perp: float = 0.1
    bath: Sequence[BathMode] = field(default_factory=default_bath)

    n_atoms = 3
    ndim = 3
    translation_invariant = True

    def __post_init__(self):
        self.bath = [b if isinstance(b, BathMode) else BathMode(*b) for b in self.bath]
        self.n_bath = len(self.bath)
        if min(self.m_A, self.m_B, self.m_C) <= 0 or self.d_BC <= 0:
            raise ConfigurationError("masses and d_BC must be positive")
        self._bm = np.array([b.mass for b in self.bath])
        self._bw2 = np.array([b.omega for b in self.bath]) ** 2
        self._bc = np.array([b.coupling for b in self.bath])
        if np.any(self._bm <= 0) or np.any(self._bw2 <= 0):
            raise ConfigurationError("bath masses and frequencies must be positive")

    @property
    def masses(self) -> np.ndarray:
        return np.array([self.m_A, self.m_B, self.m_C])

    @property
    def bath_masses(self) -> np.ndarray:
        return self._bm.copy()

    def reference_geometry(self) -> np.ndarray:
        """Minimum-energy coordinates with A in the right-hand well."""
        rb = np.array([0.5 * self.d_BC, 0.0, 0.0])
        rc = -rb
        ra = np.array([self.a, 0.0, 0.0])
        q = self.a
        bath = self._bc * q / (self._bm * self._bw2)
        return np.concatenate([ra, rb, rc, bath])

    def _split(self, positions):
        ra = positions[..., 0:3]
        rb = positions[..., 3:6]
        rc = positions[..., 6:9]
        qb = positions[..., 9:]
        u = rb - rc
        d = np.linalg.norm(u, axis=-1)
        e = u / d[..., None]
        v = ra - 0.5 * (rb + rc)
        q = np.sum(v * e, axis=-1)
        return ra, rb, rc, qb, d, e, v, q

    def _terms(self, d, v, q, qb):
        vdw, dvdw = _double_well(q, self.v0, self.a, self.extension_range)
        perp2 = np.sum(v * v, axis=-1) - q * q
        shift = qb - self._bc * q[..., None] / (self._bm * self._bw2)
        e_bath = 0.5 * np.sum(self._bm * self._bw2 * shift * shift, axis=-1)
        energy = vdw + 0.5 * self.k_perp * perp2 + 0.5 * self.k_anchor * (d - self.d_BC) ** 2 + e_bath
        return energy, dvdw, shift

    def _energy(self, positions):
        _, _, _, qb, d, _, v, q = self._split(positions)
        return self._terms(d, v, q, qb)[0]

    def _gradient(self, positions):
        _, _, _, qb, d, e, v, q = self._split(positions)
        _, dvdw, shift = self._terms(d, v, q, qb)
        # partial derivatives with v, q, d treated as independent
        dE_dq = dvdw - self.k_perp * q - np.sum(self._bc * shift, axis=-1)
        dE_dv = self.k_perp * v
        dE_dd = self.k_anchor * (d - self.d_BC)
        g_v = dE_dv + dE_dq[..., None] * e
        g_e = dE_dq[..., None] * v
        # J g_e with J = (I - e e^T)/d
        jg = (g_e - np.sum(g_e * e, axis=-1)[..., None] * e) / d[..., None]
        g_u = jg + dE_dd[..., None] * e
        grad = np.empty_like(positions)
        grad[..., 0:3] = g_v
        grad[..., 3:6] = -0.5 * g_v + g_u
        grad[..., 6:9] = -0.5 * g_v - g_u
        grad[..., 9:] = self._bm * self._bw2 * shift
        return grad

    def parameters(self):
        return {
            "kind": "triatomic_bath",
            "m_A": self.m_A,
            "m_B": self.m_B,
            "m_C": self.m_C,
            "d_BC": self.d_BC,
            "k_anchor": self.k_anchor,
            "v0": self.v0,
            "a": self.a,
            "extension_range": list(self.extension_range),
            "k_perp": self.k_perp,
            "bath": [[b.mass, b.omega, b.coupling] for b in self.bath],
        }


def symmetrize_profile(q, values, atol: float = 1e-9):
    """Even part ``(V(q) + V(-q))/2`` of a tabulated profile.

    The grid must be symmetric about zero (``q[::-1] == -q`` within ``atol``).
    """
    q = np.asarray(q, dtype=float)
    values = np.asarray(values, dtype=float)
    if q.shape != values.shape or q.ndim != 1:
        raise ConfigurationError("profile table must be two equal-length columns")
    order = np.argsort(q)
    q, values = q[order], values[order]
    if not np.allclose(q[::-1], -q, rtol=0.0, atol=atol):
        raise ConfigurationError("profile grid is not symmetric about q = 0")
    return q, 0.5 * (values + values[::-1])


def load_profile(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a two-column (q, V) plain-text table in atomic units."""
    data = np.loadtxt(path, ndmin=2)
    if data.shape[1] != 2:
        raise ConfigurationError(f"{path}: expected two columns, got {data.shape[1]}")
    return data[:, 0], data[:, 1]


def build_model(kind: str, **params) -> PotentialModel:
    """Construct a registered model from plain configuration values."""
    kind = kind.lower()
    if kind in ("double_well", "doublewell", "dw"):
        return DoubleWell1D(**params)
    if kind == "harmonic":
        return Harmonic1D(**params)
    if kind == "free":
        return FreeParticle(**params)
    if kind in ("triatomic_bath", "triatomic"):
        if "bath" in params and params["bath"] is not None:
            params["bath"] = [BathMode(*b) for b in params["bath"]]
        return TriatomicBathModel(**params)
    raise ConfigurationError(f"unknown potential model {kind!r}")

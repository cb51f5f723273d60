import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from openpimd.pathcore import (
    GeometryError,
    PathState,
    SystemSpec,
    bc_geometry,
    forces,
    hamiltonian_energy,
    initial_state,
    kinetic_energy,
    load_state,
    potential_energy,
    save_state,
    shifted_bead,
    spring_energy,
    standard_end_to_end,
    zero_state,
)
from openpimd.potentials import ConfigurationError, DoubleWell1D, FreeParticle, TriatomicBathModel
from openpimd.ves import BasisSet, BiasState, CVBias, EndToEndCV


def triatomic_setup(rng, nbeads=6, beta=800.0, noise=0.1):
    model = TriatomicBathModel()
    system = SystemSpec(masses=tuple(model.masses), nbeads=nbeads, beta=beta,
                        bath_masses=tuple(model.bath_masses))
    state = initial_state(system, model.reference_geometry())
    state.r += rng.normal(scale=noise, size=state.r.shape)
    state.s += rng.normal(scale=noise, size=state.s.shape)
    state.x = np.array(rng.uniform(-1, 1))
    state.p = rng.normal(size=state.p.shape)
    state.ps = rng.normal(size=state.ps.shape)
    state.px = np.array(rng.normal())
    return model, system, state


def free_system(nbeads=4, beta=100.0):
    return SystemSpec(masses=(1.0, 16.0, 16.0), nbeads=nbeads, beta=beta)


def test_system_validation():
    with pytest.raises(ConfigurationError):
        SystemSpec(masses=(1.0, 1.0, 1.0), nbeads=1, beta=1.0)
    with pytest.raises(ConfigurationError):
        SystemSpec(masses=(1.0, 1.0, 1.0), nbeads=4, beta=1.0, anchors=(0, 2))
    with pytest.raises(ConfigurationError):
        SystemSpec(masses=(1.0, -1.0, 1.0), nbeads=4, beta=1.0)
    s = SystemSpec(masses=(1.0, 1.0, 1.0), nbeads=16, beta=2.0)
    assert s.omega_l == pytest.approx(2.0)
    assert s.position_dof == 3 * 3 * 16 + 1


def test_bc_geometry_axis_aligned():
    system = free_system()
    state = zero_state(system)
    state.r[1, 0] = [1.0, 0.0, 0.0]
    geo = bc_geometry(state, system)
    assert np.allclose(geo.e, [1, 0, 0]) and geo.d == pytest.approx(1.0)
    assert np.allclose(geo.jac_b, np.diag([0.0, 1.0, 1.0]))
    assert np.allclose(geo.e @ geo.jac_b, 0.0, atol=1e-15)


def test_bc_jacobian_matches_finite_differences(rng):
    system = free_system()
    state = zero_state(system)
    state.r[1, 0] = rng.normal(size=3)
    state.r[2, 0] = rng.normal(size=3)
    geo = bc_geometry(state, system)
    h = 1e-6
    for k in range(3):
        plus, minus = state.copy(), state.copy()
        plus.r[1, 0, k] += h
        minus.r[1, 0, k] -= h
        col = (bc_geometry(plus, system).e - bc_geometry(minus, system).e) / (2 * h)
        assert np.allclose(col, geo.jac_b[:, k], atol=1e-8)


def test_coincident_anchors_raise():
    system = free_system()
    with pytest.raises(GeometryError):
        bc_geometry(zero_state(system), system)


def test_shifted_bead_examples(rng):
    system = free_system(nbeads=4)
    state = zero_state(system)
    state.r[1, 0] = [1.0, 0.0, 0.0]
    state.r[0] = rng.normal(size=(4, 3))
    assert np.allclose(shifted_bead(state, system, 1), state.r[0, 1])
    state.x = np.array(1.0)
    assert np.allclose(shifted_bead(state, system, 1), state.r[0, 1] - [-0.25, 0, 0])
    assert np.allclose(shifted_bead(state, system, 2), state.r[0, 2])
    assert np.allclose(shifted_bead(state, system, 4), state.r[0, 0] - [0.5, 0, 0])


def test_standard_end_to_end():
    assert np.allclose(standard_end_to_end([1, 2, 3], [0, 2, 3]), [1, 0, 0])
    assert np.allclose(standard_end_to_end([1, 2, 3], [1, 2, 3]), 0)


def test_closed_path_limit_matches_independent_sum(rng):
    model, system, state = triatomic_setup(rng)
    state.x = np.array(0.0)
    l = system.nbeads
    ref = 0.0
    m = np.array(system.masses)
    for i in range(l):
        j = (i + 1) % l
        ref += 0.5 * system.omega_l**2 * np.sum(m[:, None] * (state.r[:, i] - state.r[:, j]) ** 2)
        ref += 0.5 * system.omega_l**2 * np.sum(np.array(system.bath_masses) * (state.s[:, i] - state.s[:, j]) ** 2)
        flat = np.concatenate([state.r[:, i].ravel(), state.s[:, i]])
        ref += model.energy(flat) / l
    ref += kinetic_energy(state, system)
    assert hamiltonian_energy(state, system, model) == pytest.approx(ref, rel=1e-12)


def test_term_by_term_with_shift(rng):
    model, system, state = triatomic_setup(rng)
    l = system.nbeads
    e = (state.r[1, 0] - state.r[2, 0]) / np.linalg.norm(state.r[1, 0] - state.r[2, 0])
    pot = 0.0
    for i in range(l + 1):
        y = i / l - 0.5
        w = 0.5 / l if i in (0, l) else 1.0 / l
        r = state.r[:, i % l].copy()
        r[0] -= state.x * y * e
        pot += w * model.energy(np.concatenate([r.ravel(), state.s[:, i % l]]))
    expected = (spring_energy(state, system) + pot + 0.5 * system.mass_x * state.x**2 / system.beta**2
                + kinetic_energy(state, system))
    assert hamiltonian_energy(state, system, model) == pytest.approx(expected, rel=1e-12)


def test_only_x_term_for_coincident_free_beads():
    system = free_system(nbeads=8, beta=50.0)
    state = zero_state(system)
    state.r[1, :] = [2.0, 0.0, 0.0]
    state.x = np.array(0.7)
    energy = hamiltonian_energy(state, system, FreeParticle(n_atoms=3, ndim=3))
    assert energy == pytest.approx(0.5 * 1.0 * 0.49 / 2500.0, rel=1e-14)


def _numeric_gradient(state, system, model, bias, h=1e-5):
    def energy(st):
        return float(hamiltonian_energy(st, system, model, bias) - kinetic_energy(st, system))

    g_r = np.zeros_like(state.r)
    for idx in np.ndindex(state.r.shape):
        a, b = state.copy(), state.copy()
        a.r[idx] += h
        b.r[idx] -= h
        g_r[idx] = (energy(a) - energy(b)) / (2 * h)
    g_s = np.zeros_like(state.s)
    for idx in np.ndindex(state.s.shape):
        a, b = state.copy(), state.copy()
        a.s[idx] += h
        b.s[idx] -= h
        g_s[idx] = (energy(a) - energy(b)) / (2 * h)
    a, b = state.copy(), state.copy()
    a.x = a.x + h
    b.x = b.x - h
    return g_r, (energy(a) - energy(b)) / (2 * h), g_s


@pytest.mark.parametrize("with_bias", [False, True])
def test_forces_match_finite_differences(rng, with_bias):
    bias = None
    if with_bias:
        basis = BasisSet.even_1d()
        coef = rng.normal(scale=1e-3, size=basis.size)
        bias = CVBias(BiasState(basis, 800.0, 1e-3, coef, coef), EndToEndCV())
    worst = 0.0
    for _ in range(20):
        model, system, state = triatomic_setup(rng, nbeads=4)
        f = forces(state, system, model, bias)
        g_r, g_x, g_s = _numeric_gradient(state, system, model, bias)
        scale = max(np.max(np.abs(g_r)), abs(g_x), 1e-6)
        err = max(np.max(np.abs(-f.r - g_r)), abs(-f.x - g_x), np.max(np.abs(-f.s - g_s))) / scale
        worst = max(worst, err)
    assert worst <= 1e-6


def test_x_force_at_zero_shift(rng):
    model, system, state = triatomic_setup(rng)
    state.x = np.array(0.0)
    f = forces(state, system, model)
    e = (state.r[1, 0] - state.r[2, 0]) / np.linalg.norm(state.r[1, 0] - state.r[2, 0])
    expected = 0.0
    for i in range(system.nbeads + 1):
        flat = np.concatenate([state.r[:, i % system.nbeads].ravel(), state.s[:, i % system.nbeads]])
        grad_a = model.gradient(flat)[:3]
        expected -= system.weights[i] * system.y[i] * (e @ grad_a)
    assert f.x == pytest.approx(-expected, rel=1e-10)


def test_free_particle_forces_are_springs(rng):
    system = free_system(nbeads=5)
    state = zero_state(system)
    state.r[...] = rng.normal(size=state.r.shape)
    state.x = np.array(0.3)
    f = forces(state, system, FreeParticle(n_atoms=3, ndim=3))
    m = np.array(system.masses)[:, None, None]
    lap = 2 * state.r - np.roll(state.r, 1, axis=1) - np.roll(state.r, -1, axis=1)
    assert np.allclose(f.r, -system.omega_l**2 * m * lap)
    assert f.x == pytest.approx(-1.0 * 0.3 / system.beta**2)


def test_translation_invariance(rng):
    model, system, state = triatomic_setup(rng)
    moved = state.copy()
    moved.r += rng.normal(size=3)
    assert spring_energy(moved, system) == pytest.approx(spring_energy(state, system), rel=1e-12)
    assert potential_energy(moved, system, model) == pytest.approx(potential_energy(state, system, model), rel=1e-10)


def test_batched_energy_matches_single(rng):
    model, system, state = triatomic_setup(rng)
    stack = PathState(*(np.stack([a, a * 1.0]) for a in state.arrays()))
    stack.r[1] += 0.01
    e = hamiltonian_energy(stack, system, model)
    assert e[0] == pytest.approx(hamiltonian_energy(state, system, model), rel=1e-14)
    assert e.shape == (2,)


def test_one_dimensional_system_has_unit_axis():
    system = SystemSpec(masses=(1836.0,), nbeads=8, beta=1000.0, anchors=None, ndim=1)
    state = zero_state(system)
    state.x = np.array(1.0)
    assert np.allclose(shifted_bead(state, system, 0), [0.5])


def test_state_round_trip(rng, tmp_path):
    _, system, state = triatomic_setup(rng)
    save_state(tmp_path / "s.npz", state, system)
    back, sys2 = load_state(tmp_path / "s.npz")
    assert sys2 == system
    for a, b in zip(state.arrays(), back.arrays()):
        assert np.array_equal(a, b)

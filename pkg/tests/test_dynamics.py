import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from openpimd.dynamics import (
    GLESpec,
    HarmonicPropagator,
    Integrator,
    IntegratorConfig,
    NormalModes,
    ThermostatConfig,
    gle_propagator,
    gle_step,
    load_gle_matrices,
    md_step,
    nm_exact_step,
    reflect_wall,
    remove_com_velocity,
)
from openpimd.pathcore import SystemSpec, hamiltonian_energy, initial_state, zero_state
from openpimd.potentials import ConfigurationError, DoubleWell1D, FreeParticle, TriatomicBathModel


def one_d(nbeads=16, beta=2000.0, mass=1836.0):
    return SystemSpec(masses=(mass,), nbeads=nbeads, beta=beta, anchors=None, ndim=1)


def thermal(system, state, rng):
    m = np.asarray(system.masses)[:, None, None]
    state.p[...] = rng.normal(size=state.p.shape) * np.sqrt(m / system.beta)
    state.px[...] = rng.normal(size=state.px.shape) * np.sqrt(system.x_md_mass / system.beta)
    if system.nbath:
        mb = np.asarray(system.bath_masses)[:, None]
        state.ps[...] = rng.normal(size=state.ps.shape) * np.sqrt(mb / system.beta)
    return state


@pytest.mark.parametrize("l", [1, 2, 3, 4, 7, 8, 64])
def test_normal_modes_orthogonal_and_fft_consistent(l, rng):
    nm = NormalModes(l)
    c = nm.matrix
    assert np.allclose(c @ c.T, np.eye(l), atol=1e-12)
    a = rng.normal(size=(3, l, 2))
    assert np.allclose(nm.to_nm(a, 1), np.einsum("nk,anb->akb", c, a), atol=1e-12)
    assert np.allclose(nm.from_nm(nm.to_nm(a, 1), 1), a, atol=1e-12)
    wk = 2 * np.sin(np.pi * np.arange(l) / l)
    assert np.allclose(np.sort(nm.frequency_factors), np.sort(wk))


def test_centroid_drifts_freely():
    system = one_d(nbeads=2)
    state = zero_state(system)
    state.p[...] = 3.0
    nm_exact_step(state, system, 5.0)
    assert np.allclose(state.r, 3.0 * 5.0 / 1836.0)
    assert np.allclose(state.p, 3.0)


def test_two_bead_internal_frequency():
    system = one_d(nbeads=2, beta=10.0, mass=1.0)
    omega = 2 * system.omega_l
    period = 2 * np.pi / omega
    state = zero_state(system)
    state.r[0, :, 0] = [0.1, -0.1]
    nm_exact_step(state, system, period / 2)
    assert np.allclose(state.r[0, :, 0], [-0.1, 0.1], atol=1e-12)


def test_x_full_period_returns():
    system = one_d(beta=50.0)
    state = zero_state(system)
    state.x = np.array(0.4)
    state.px = np.array(-0.3)
    prop = HarmonicPropagator(system, 2 * np.pi * system.beta)
    prop.step(state)
    assert state.x == pytest.approx(0.4, abs=1e-12)
    assert state.px == pytest.approx(-0.3, abs=1e-12)


def test_free_ring_energy_exact(rng):
    system = SystemSpec(masses=(1.0, 16.0, 16.0), nbeads=32, beta=100.0)
    model = FreeParticle(n_atoms=3, ndim=3)
    state = zero_state(system)
    state.r[...] = rng.normal(size=state.r.shape)
    state.r[1] += 3.0
    state.x = np.array(0.5)
    thermal(system, state, rng)
    cfg = IntegratorConfig(dt=20.0, wall=None, com_removal=False, thermostat=ThermostatConfig(kind="none"))
    integ = Integrator(system, model, cfg)
    e0 = hamiltonian_energy(state, system, model)
    for _ in range(50):
        integ.run(state, 1, rng)
        e = hamiltonian_energy(state, system, model)
        assert abs(e - e0) <= 1e-12 * abs(e0)


@pytest.mark.parametrize("case", ["double_well", "triatomic"])
def test_nve_drift(case, rng):
    if case == "double_well":
        model = DoubleWell1D()
        system = one_d(nbeads=32, beta=2000.0)
        state = initial_state(system, [0.6])
    else:
        model = TriatomicBathModel()
        system = SystemSpec(masses=tuple(model.masses), nbeads=8, beta=2000.0,
                            bath_masses=tuple(model.bath_masses))
        state = initial_state(system, model.reference_geometry())
    thermal(system, state, rng)
    cfg = IntegratorConfig(dt=10.0, wall=None, com_removal=False, thermostat=ThermostatConfig(kind="none"))
    integ = Integrator(system, model, cfg)
    e0 = hamiltonian_energy(state, system, model)
    integ.run(state, 10_000, rng)
    e1 = hamiltonian_energy(state, system, model)
    assert abs(e1 - e0) / abs(e0) < 1e-4


def test_momentum_marginal_thermal():
    rng = np.random.default_rng(7)
    beta = 1000.0
    system = one_d(nbeads=8, beta=beta, mass=1.0)
    model = FreeParticle(n_atoms=1, ndim=1, mass=1.0)
    state = zero_state(system, (64,))
    cfg = IntegratorConfig(dt=50.0, wall=None, com_removal=False,
                           thermostat=ThermostatConfig(gamma0=1e-2, gamma_x=1e-2))
    integ = Integrator(system, model, cfg, batch_shape=(64,))
    integ.run(state, 200, rng)
    samples = []
    for _ in range(40):
        integ.run(state, 100, rng)  # well beyond the slowest friction time
        samples.append(state.p[:, 0, :, 0].ravel().copy())
    p = np.concatenate(samples)
    sd = np.sqrt(1.0 / beta)
    assert stats.kstest(p / sd, "norm").pvalue > 0.01
    # equipartition, per degree of freedom <p^2/2m> = 1/(2 beta)
    ke = 0.5 * np.mean(p * p)
    assert ke == pytest.approx(0.5 / beta, rel=0.02)


def test_free_ring_radius_of_gyration():
    rng = np.random.default_rng(3)
    beta, l, m = 1000.0, 16, 1.0
    system = one_d(nbeads=l, beta=beta, mass=m)
    model = FreeParticle(n_atoms=1, ndim=1, mass=m)
    nw = 128
    state = zero_state(system, (nw,))
    cfg = IntegratorConfig(dt=100.0, wall=None, com_removal=False, thermostat=ThermostatConfig())
    integ = Integrator(system, model, cfg, batch_shape=(nw,))
    integ.run(state, 200, rng)
    rg = []
    for _ in range(100):
        integ.run(state, 5, rng)
        r = state.r[:, 0, :, 0]
        rg.append(np.mean((r - r.mean(axis=1, keepdims=True)) ** 2, axis=1))
    # springs m w_l^2 (r_i - r_{i+1})^2 / 2 sampled at temperature 1/beta
    k = np.arange(1, l)
    exact = np.sum(1.0 / (beta * m * (system.omega_l * 2 * np.sin(np.pi * k / l)) ** 2)) / l
    rg = np.array(rg).ravel()
    assert rg.mean() == pytest.approx(exact, rel=0.03)


def test_scalar_gle_matches_langevin():
    rng1 = np.random.default_rng(1)
    rng2 = np.random.default_rng(1)
    gamma, dt, beta, m = 0.3, 0.7, 2.0, 5.0
    p = np.array([0.4, -1.0, 2.0])
    new, aux = gle_step(p, np.zeros((0, 3)), dt, GLESpec([[gamma]]), rng1, beta, m)
    xi = rng2.standard_normal((1, 3))[0]
    expected = np.exp(-gamma * dt) * p + np.sqrt(m / beta * (1 - np.exp(-2 * gamma * dt))) * xi
    assert np.allclose(new, expected)
    assert aux.shape == (0, 3)


def test_zero_drift_gle_is_identity(rng):
    p = rng.normal(size=5)
    aux = rng.normal(size=(2, 5))
    new, new_aux = gle_step(p, aux, 1.0, GLESpec(np.zeros((3, 3))), rng)
    assert np.allclose(new, p) and np.allclose(new_aux, aux)


def test_gle_stationary_covariance():
    rng = np.random.default_rng(11)
    A = np.array([[0.5, 0.8, 0.0], [-0.8, 0.6, 0.3], [0.0, -0.3, 1.2]])
    C = np.array([[1.0, 0.2, 0.0], [0.2, 1.5, 0.1], [0.0, 0.1, 0.8]])
    spec = GLESpec(A, C)
    T, S = gle_propagator(spec, 0.4, beta=1.0)
    nwalk = 4000
    state = np.zeros((3, nwalk))
    acc = np.zeros((3, 3))
    n = 0
    for step in range(600):
        state = T @ state + S @ rng.standard_normal((3, nwalk))
        if step >= 100 and step % 5 == 0:
            acc += state @ state.T / nwalk
            n += 1
    assert np.allclose(acc / n, C, atol=0.02 * np.max(C))


def test_gle_rejects_unstable_drift():
    with pytest.raises(ConfigurationError):
        GLESpec([[-1.0]])


def test_load_gle_matrices(tmp_path):
    (tmp_path / "g.txt").write_text("1\n0.1 0.2\n-0.2 0.5\n")
    spec = load_gle_matrices(tmp_path / "g.txt")
    assert spec.n_aux == 1 and spec.C is None
    (tmp_path / "bad.txt").write_text("1\n0.1 0.2 0.3\n")
    with pytest.raises(ConfigurationError):
        load_gle_matrices(tmp_path / "bad.txt")


def test_remove_com_velocity(rng):
    system = SystemSpec(masses=(1.0, 16.0, 16.0), nbeads=4, beta=10.0)
    state = zero_state(system)
    remove_com_velocity(state, system)
    assert np.all(state.p == 0)
    single = one_d(nbeads=6)
    st1 = zero_state(single)
    st1.p[...] = 2.5
    remove_com_velocity(st1, single)
    assert np.allclose(st1.p, 0.0)
    state.p[...] = rng.normal(size=state.p.shape)
    state.px = np.array(1.3)
    remove_com_velocity(state, system)
    assert np.all(np.abs(state.p.sum(axis=(0, 1))) < 1e-12)
    assert state.px == 1.3


def test_reflect_wall_examples():
    x, p = reflect_wall(3.2, 1.0, 3.0)
    assert x == pytest.approx(2.8) and p == -1.0
    x, p = reflect_wall(1.0, 1.0, 3.0)
    assert x == 1.0 and p == 1.0
    x, p = reflect_wall(-3.5, -2.0, 3.0)
    assert x == pytest.approx(-2.5) and p == 2.0


@given(st.floats(-50, 50))
def test_reflect_wall_lands_inside(x0):
    x, _ = reflect_wall(x0, 1.0, 3.0)
    assert -3.0 <= x <= 3.0


def test_identical_seeds_identical_trajectories():
    model = DoubleWell1D()
    system = one_d(nbeads=16)
    cfg = IntegratorConfig(dt=10.0)

    def trajectory(seed):
        rngs = [np.random.default_rng([seed, k]) for k in range(4)]
        state = initial_state(system, [0.6], nwalkers=4)
        Integrator(system, model, cfg, batch_shape=(4,)).run(state, 300, rngs)
        return state

    a, b = trajectory(5), trajectory(5)
    for u, v in zip(a.arrays(), b.arrays()):
        assert np.array_equal(u, v)
    c = trajectory(6)
    assert not np.array_equal(a.r, c.r)


def test_walker_independent_of_batch():
    model = DoubleWell1D()
    system = one_d(nbeads=16)
    cfg = IntegratorConfig(dt=10.0)
    rngs = [np.random.default_rng([1, k]) for k in range(3)]
    state = initial_state(system, [0.6], nwalkers=3)
    Integrator(system, model, cfg, batch_shape=(3,)).run(state, 100, rngs)
    alone = initial_state(system, [0.6], nwalkers=1)
    Integrator(system, model, cfg, batch_shape=(1,)).run(alone, 100, [np.random.default_rng([1, 0])])
    assert np.allclose(alone.r[0], state.r[0], rtol=1e-12, atol=1e-14)


def test_md_step_gle_runs(rng):
    system = one_d(nbeads=8)
    spec = GLESpec([[1e-3, 1e-3], [-1e-3, 1e-3]])
    cfg = IntegratorConfig(dt=10.0, thermostat=ThermostatConfig(kind="gle", gle=spec))
    state = initial_state(system, [0.6])
    for _ in range(5):
        md_step(state, system, DoubleWell1D(), cfg, rng)
    assert state.is_finite()


def test_config_validation():
    with pytest.raises(ConfigurationError):
        IntegratorConfig(dt=0.0)
    with pytest.raises(ConfigurationError):
        IntegratorConfig(wall=-1.0)

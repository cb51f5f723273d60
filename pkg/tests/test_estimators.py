import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from openpimd.estimators import (
    DistributionResult,
    block_average,
    bootstrap_distribution,
    classical_momentum,
    coefficient_blocks,
    has_significant_minimum,
    momentum_transform,
    momentum_variance,
    ntilde_from_free_energy,
)
from openpimd.oracle1d import ground_state_weight


def test_constant_free_energy_gives_flat_ntilde():
    x = np.linspace(-3, 3, 61)
    nt = ntilde_from_free_energy(x, np.full_like(x, 0.3), 1000.0)
    assert np.allclose(nt.values, 1.0)


def test_free_particle_ntilde():
    m, beta = 1836.0, 1000.0
    x = np.linspace(-2, 2, 401)
    nt = ntilde_from_free_energy(x, m * x**2 / (2 * beta**2), beta)
    assert nt.at(1.0) == pytest.approx(0.3992, abs=2e-4)
    with pytest.raises(ValueError):
        ntilde_from_free_energy(np.linspace(0.1, 1, 10), np.zeros(10), beta)


def test_gaussian_transform_pair():
    sigma = 0.7
    x = np.linspace(-12, 12, 4001)
    nt = DistributionResult(x, np.exp(-x**2 / (2 * sigma**2)))
    p = np.linspace(-10, 10, 801)
    npd = momentum_transform(nt, p)
    exact = sigma / np.sqrt(2 * np.pi) * np.exp(-sigma**2 * p**2 / 2)
    assert np.max(np.abs(npd.values - exact)) < 1e-10
    assert np.trapezoid(npd.values, p) == pytest.approx(1.0, abs=1e-6)
    assert np.allclose(npd.values, npd.values[::-1], rtol=0, atol=1e-15)


def test_classical_free_particle_transform():
    m, beta = 1836.0, 1000.0
    x = np.linspace(-6, 6, 3001)
    nt = DistributionResult(x, np.exp(-m * x**2 / (2 * beta)))
    p = np.linspace(0, 10, 201)
    assert np.allclose(momentum_transform(nt, p).values, classical_momentum(m, beta, p).values, atol=1e-10)


def test_classical_momentum_properties():
    m, beta = 1836.0, 2000.0
    p = np.linspace(-40, 40, 20001)
    d = classical_momentum(m, beta, p)
    assert d.at(0.0) == pytest.approx(np.sqrt(beta / (2 * np.pi * m)))
    assert np.trapezoid(d.values, p) == pytest.approx(1.0, abs=1e-10)
    assert momentum_variance(d) == pytest.approx(m / beta, rel=1e-8)


def test_unconverged_tail_warns():
    x = np.linspace(-1, 1, 101)
    with pytest.warns(RuntimeWarning):
        momentum_transform(DistributionResult(x, np.ones_like(x)))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_transform_is_linear(seed):
    rng = np.random.default_rng(seed)
    x = np.linspace(-3, 3, 121)
    a, b = rng.normal(size=(2, x.size))
    p = np.linspace(0, 8, 17)
    ta = momentum_transform(DistributionResult(x, a), p, tail_tol=np.inf).values
    tb = momentum_transform(DistributionResult(x, b), p, tail_tol=np.inf).values
    tab = momentum_transform(DistributionResult(x, a + b), p, tail_tol=np.inf).values
    assert np.allclose(tab, ta + tb, atol=1e-12)


def test_csv_round_trip(tmp_path):
    d = DistributionResult(np.linspace(0, 1, 5), np.arange(5.0), np.full(5, 0.1), kind="np")
    d.write_csv(tmp_path / "d.csv", {"beta": 5000})
    back = DistributionResult.read_csv(tmp_path / "d.csv")
    assert back.kind == "np"
    assert np.array_equal(back.values, d.values) and np.array_equal(back.errors, d.errors)


def test_block_average_white_noise():
    x = np.random.default_rng(0).normal(size=2**14)
    stats = block_average(x)
    assert stats.block_size <= 4
    assert stats.standard_error == pytest.approx(1 / np.sqrt(x.size), rel=0.2)


def test_block_average_ar1():
    rng = np.random.default_rng(1)
    n, phi = 2**17, 0.9
    noise = rng.normal(size=n)
    x = np.empty(n)
    x[0] = noise[0]
    for i in range(1, n):
        x[i] = phi * x[i - 1] + noise[i]
    stats = block_average(x)
    expected = n * (1 - phi) / (1 + phi)
    assert expected / 1.5 <= stats.effective_samples <= expected * 1.5


def test_block_average_constant_and_short():
    stats = block_average(np.full(64, 2.0))
    assert np.all(stats.standard_errors == 0) and stats.mean == 2.0
    with pytest.raises(ValueError):
        block_average(np.zeros(10))


def test_bootstrap_identical_blocks():
    blocks = np.tile([1.0, 2.0], (10, 1))
    sig = bootstrap_distribution(blocks, lambda c: {"v": c * 3}, 50, 0)
    assert np.all(sig["v"] == 0)
    with pytest.raises(ValueError):
        bootstrap_distribution(blocks[:5], lambda c: {"v": c})


def test_bootstrap_linear_propagation_and_resample_stability():
    rng = np.random.default_rng(3)
    nb, spread = 40, 0.2
    blocks = np.zeros((nb, 3))
    blocks[:, 0] = rng.normal(scale=spread, size=nb)
    g0 = -1.0  # T_2 at the domain centre, the only coefficient that varies

    def pipe(c):
        return {"v": np.array([c[0] * g0]), "w": np.linspace(0, 1, 5) * c[0]}

    s100 = bootstrap_distribution(blocks, pipe, 100, 1)
    s200 = bootstrap_distribution(blocks, pipe, 200, 2)
    sample_sd = np.std(blocks[:, 0], ddof=1) / np.sqrt(nb)
    assert s100["v"][0] == pytest.approx(sample_sd, rel=0.15)
    assert np.allclose(s100["w"][1:], s200["w"][1:], rtol=0.2)


def test_coefficient_blocks_shape():
    a = np.random.default_rng(0).normal(size=(200, 3))
    b = coefficient_blocks(a, block_size=10)
    assert b.shape == (20, 3)
    assert np.allclose(b[0], a[:10].mean(axis=0))


def test_significant_minimum_detector():
    p = np.linspace(0, 10, 101)
    bump = np.exp(-p**2) + 0.3 * np.exp(-(p - 5) ** 2)
    d = DistributionResult(p, bump, np.full_like(p, 1e-3), kind="np")
    found, info = has_significant_minimum(d)
    assert found and 2 < info["p_min"] < 5
    flat = DistributionResult(p, np.exp(-p**2 / 4), np.full_like(p, 1e-3), kind="np")
    assert not has_significant_minimum(flat)[0]
    noisy = DistributionResult(p, bump, np.full_like(p, 1.0), kind="np")
    assert not has_significant_minimum(noisy)[0]


def test_ground_state_weight():
    assert ground_state_weight(9.11e-5, 5000.0) == pytest.approx(0.612, abs=1e-3)
    assert ground_state_weight(0.0, 5000.0) == 0.5
    assert ground_state_weight(1.0, 1e6) == pytest.approx(1.0)

import numpy as np
import pytest
from scipy.integrate import quad

from errors import DomainError
from gumbel_sampler import (DensityMode, TemperatureSchedule, anneal, gumbel_from_uniform, log_density, on_simplex,
                            reparameterize, sample_gumbel)


def test_inverse_cdf_hand_values():
    np.testing.assert_allclose(gumbel_from_uniform(np.exp(-1.0)), 0.0, atol=1e-15)
    np.testing.assert_allclose(gumbel_from_uniform(np.exp(-np.e)), -1.0, rtol=1e-14)


def test_inverse_cdf_clamps_endpoints():
    sigma = gumbel_from_uniform(np.array([0.0, 1.0]))
    assert np.all(np.isfinite(sigma))


def test_gumbel_mean_is_euler_mascheroni():
    draws = sample_gumbel(np.random.default_rng(0), 1, 100_000)
    assert draws.mean() == pytest.approx(0.5772, abs=0.02)


def test_sample_shapes():
    rng = np.random.default_rng(1)
    assert sample_gumbel(rng, 3).shape == (3,)
    assert sample_gumbel(rng, 3, 7).shape == (7, 3)
    with pytest.raises(DomainError):
        sample_gumbel(rng, 0)


@pytest.mark.parametrize("sigma,tau,expected", [
    ((0.0, 0.0), 1.0, (0.5, 0.5)),
    ((np.log(4.0), 0.0), 1.0, (0.8, 0.2)),
    ((np.log(4.0), 0.0), 0.5, (16 / 17, 1 / 17)),
])
def test_reparameterize_hand_values(sigma, tau, expected):
    z = reparameterize(np.array([0.5, 0.5]), np.array(sigma), tau)
    np.testing.assert_allclose(z, expected, rtol=1e-12)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_reparameterize_rejects_non_positive_temperature(tau):
    with pytest.raises(DomainError):
        reparameterize(np.array([0.5, 0.5]), np.zeros(2), tau)


def test_relaxed_samples_lie_on_simplex():
    rng = np.random.default_rng(2)
    for tau in (1e-3, 0.1, 1.0, 10.0):
        pi = rng.dirichlet(np.ones(6))
        z = reparameterize(pi, sample_gumbel(rng, 6, 200), tau)
        assert on_simplex(z)


def test_zero_probability_class_is_floored():
    z = reparameterize(np.array([0.0, 1.0]), np.zeros(2), 1.0)
    assert np.all(np.isfinite(z))
    assert z[0] < 1e-11


def test_concentration_at_low_temperature():
    z = reparameterize(np.array([0.3, 0.7]), np.array([0.5, -0.2]), 1e-3)
    assert z.max() >= 0.999


def test_gumbel_max_is_categorical():
    rng = np.random.default_rng(3)
    pi = np.array([0.7, 0.2, 0.1])
    draws = 10_000
    noises = sample_gumbel(rng, 3, draws)
    labels = np.argmax(reparameterize(pi, noises, 1.0), axis=1)
    freq = np.bincount(labels, minlength=3) / draws
    sigma = np.sqrt(pi * (1 - pi) / draws)
    assert np.all(np.abs(freq - pi) <= 4 * sigma)
    # argmax does not depend on the temperature
    np.testing.assert_array_equal(labels, np.argmax(reparameterize(pi, noises, 0.1), axis=1))


def test_log_density_degenerate_simplex():
    assert log_density(np.array([1.0]), np.array([1.0])) == 0.0


def test_log_density_hand_value():
    value = log_density(np.array([0.6, 0.4]), np.array([0.6, 0.4]))
    assert value == pytest.approx(0.52 - 0.6 - np.log1p(np.exp(-0.2)), abs=1e-12)
    assert value == pytest.approx(-0.6781, abs=1e-4)


def test_log_density_uniform_pi():
    z = np.array([0.1, 0.9])
    assert log_density(np.array([0.5, 0.5]), z) == pytest.approx(0.5 - 0.5 - np.log(2), abs=1e-14)


def test_log_density_differences_are_linear():
    rng = np.random.default_rng(4)
    pi = rng.dirichlet(np.ones(5))
    z1, z2 = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
    diff = log_density(pi, z1) - log_density(pi, z2)
    assert diff == pytest.approx(pi @ (z1 - z2), abs=1e-14)


def test_log_density_batched():
    rng = np.random.default_rng(5)
    pi = rng.dirichlet(np.ones(4))
    z = rng.dirichlet(np.ones(4), size=6)
    np.testing.assert_allclose(log_density(pi, z), [log_density(pi, row) for row in z], rtol=1e-14)


@pytest.mark.parametrize("tau", [0.5, 1.0, 2.0])
def test_exact_density_normalizes_on_two_classes(tau):
    pi = np.array([0.3, 0.7])

    def density(x):
        return float(np.exp(log_density(pi, np.array([x, 1.0 - x]), DensityMode.EXACT, tau)))

    total, _ = quad(density, 0.0, 1.0, limit=200)
    assert total == pytest.approx(1.0, abs=1e-5)


def test_exact_density_needs_temperature():
    with pytest.raises(DomainError):
        log_density(np.array([0.5, 0.5]), np.array([0.5, 0.5]), DensityMode.EXACT)


def test_anneal_with_zero_rate_keeps_tau():
    sched = TemperatureSchedule(tau0=1.0, tau_min=0.1, beta=0.0)
    for t in range(1, 50):
        assert anneal(sched, t) == 1.0


def test_anneal_hits_floor():
    sched = TemperatureSchedule(tau0=1.0, tau_min=0.1, beta=100.0)
    assert anneal(sched, 1) == 0.1


def test_anneal_compounds():
    sched = TemperatureSchedule(tau0=1.0, tau_min=0.1, beta=0.1)
    anneal(sched, 1)
    assert anneal(sched, 2) == pytest.approx(np.exp(-0.3), rel=1e-12)
    assert sched.tau == pytest.approx(0.7408, abs=1e-4)


def test_anneal_rejects_step_zero():
    with pytest.raises(DomainError):
        anneal(TemperatureSchedule(), 0)


def test_schedule_bounds_validated():
    with pytest.raises(ValueError):
        TemperatureSchedule(tau0=0.2, tau_min=0.3)
    assert TemperatureSchedule(tau0=2.0, tau_min=0.5).tau == 2.0


def test_density_mode_accepts_surrogate_name():
    assert DensityMode("surrogate") is DensityMode.PAPER
    assert DensityMode("paper") is DensityMode.PAPER
    with pytest.raises(ValueError):
        DensityMode("approximate")

import numpy as np
import pytest
from scipy.special import softmax

from audit_checks import entropy_objective
from errors import DomainError, OptimizerError
from gumbel_sampler import on_simplex
from mirror_descent import EmdConfig, exponentiated_step, maximize


def tracked(objective):
    seen = []

    def evaluate(pi):
        seen.append(pi.copy())
        return objective(pi)

    return evaluate, seen


def linear_objective(a):
    a = np.asarray(a, dtype=np.float64)
    return lambda pi: (float(a @ pi), a.copy())


def test_entropy_symmetric_optimum():
    pi, value, _ = maximize(entropy_objective(np.zeros(2)), np.array([0.5, 0.5]), EmdConfig())
    np.testing.assert_allclose(pi, [0.5, 0.5], atol=1e-12)
    assert value == pytest.approx(np.log(2))


@pytest.mark.parametrize("pi0", [[0.5, 0.5], [0.9, 0.1], [0.05, 0.95]])
def test_entropy_optimum_is_softmax(pi0):
    pi, _, iters = maximize(entropy_objective(np.array([1.0, 0.0])), np.array(pi0), EmdConfig(max_iters=500))
    expected = np.array([np.e / (1 + np.e), 1 / (1 + np.e)])
    assert np.abs(pi - expected).sum() <= 1e-3
    assert iters <= 500


def test_linear_objective_approaches_vertex():
    objective, seen = tracked(linear_objective([1.0, 0.0]))
    pi, _, iters = maximize(objective, np.array([0.5, 0.5]), EmdConfig(max_iters=200, gamma0=1.0))
    assert pi[0] >= 0.99
    first = [p[0] for p in seen]
    assert all(b >= a for a, b in zip(first, first[1:]))
    assert iters <= 200


def test_iterates_stay_on_simplex():
    rng = np.random.default_rng(0)
    for _ in range(10):
        v = int(rng.integers(2, 9))
        objective, seen = tracked(entropy_objective(rng.standard_normal(v)))
        maximize(objective, rng.dirichlet(np.ones(v)), EmdConfig())
        assert all(on_simplex(p) for p in seen)


def test_step_ignores_constant_gradient_shift():
    rng = np.random.default_rng(1)
    pi, grad = rng.dirichlet(np.ones(5)), rng.standard_normal(5)
    np.testing.assert_allclose(exponentiated_step(pi, grad, 0.7), exponentiated_step(pi, grad + 12.5, 0.7),
                               rtol=1e-12, atol=1e-15)


def test_step_floors_vanishing_components():
    pi = exponentiated_step(np.array([0.5, 0.5]), np.array([0.0, -1000.0]), 1.0)
    assert pi[1] > 0.0
    assert on_simplex(pi)


def test_concave_objective_never_worse_than_start():
    rng = np.random.default_rng(2)
    for _ in range(10):
        a = rng.standard_normal(4)
        pi0 = rng.dirichlet(np.ones(4))
        objective = entropy_objective(a)
        _, value, _ = maximize(objective, pi0, EmdConfig())
        assert value >= objective(pi0)[0]


def test_iteration_cap_reports_max_iters():
    pi, value, iters = maximize(linear_objective([1.0, 0.0]), np.array([0.5, 0.5]), EmdConfig(max_iters=3))
    assert iters == 3
    assert value == pytest.approx(pi[0])


def test_non_finite_objective_carries_last_iterate():
    calls = []

    def objective(pi):
        calls.append(pi.copy())
        if len(calls) == 3:
            return float("nan"), np.zeros_like(pi)
        return float(pi[0]), np.array([1.0, 0.0])

    with pytest.raises(OptimizerError) as excinfo:
        maximize(objective, np.array([0.5, 0.5]), EmdConfig())
    np.testing.assert_array_equal(excinfo.value.last_pi, calls[-1])
    assert excinfo.value.exit_code == 3


def test_start_must_be_on_simplex():
    with pytest.raises(DomainError):
        maximize(entropy_objective(np.zeros(2)), np.array([0.7, 0.7]), EmdConfig())


def test_softmax_reached_in_one_step():
    a = np.array([0.3, -1.2, 2.0])
    objective, seen = tracked(entropy_objective(a))
    pi, _, iters = maximize(objective, np.full(3, 1 / 3), EmdConfig())
    np.testing.assert_allclose(seen[1], softmax(a), rtol=1e-12)
    assert iters == 3

import numpy as np
import pytest
from scipy.special import logsumexp

from errors import DomainError
from marginal_scores import compute_marginal_scores
from mlp_networks import init_theta
from scene_graph import TaskConfig, synth_dataset
from variational_inference import (InferenceConfig, NodePosterior, PiInit, ReadoutMode, infer_instance, infer_node,
                                   log_posterior, node_posterior, node_rng, readout, surrogate_logit)


def test_symmetric_scores_give_uniform_pi():
    cfg = InferenceConfig(samples_infer=1000)
    pi, bound = infer_node(np.zeros(2), cfg, node_rng(0, (), 0))
    assert np.max(np.abs(pi - 0.5)) <= 0.05
    assert bound == pytest.approx(np.log(2), abs=0.1)


def test_dominant_score_concentrates_pi():
    pi, _ = infer_node(np.array([10.0, 0.0]), InferenceConfig(), node_rng(0, (), 0))
    assert pi[0] >= 0.95


def test_single_class_node():
    pi, bound = infer_node(np.array([3.0]), InferenceConfig(), node_rng(0, (), 0))
    np.testing.assert_array_equal(pi, [1.0])
    assert bound == pytest.approx(3.0)


def test_random_init_is_seeded():
    cfg = InferenceConfig(pi_init=PiInit.RANDOM, samples_infer=20)
    psi = np.array([0.4, -0.2, 1.1])
    a = infer_node(psi, cfg, node_rng(5, (1,), 2))
    b = infer_node(psi, cfg, node_rng(5, (1,), 2))
    np.testing.assert_array_equal(a[0], b[0])
    assert a[1] == b[1]


def test_non_finite_scores_rejected():
    with pytest.raises(DomainError):
        infer_node(np.array([np.nan, 0.0]), InferenceConfig(), node_rng(0, (), 0))


def test_surrogate_logit_examples():
    psi = np.array([0.7, -1.3])
    np.testing.assert_array_equal(surrogate_logit(psi, 0.0), psi)
    np.testing.assert_allclose(surrogate_logit(np.zeros(2), np.log(2)), [-np.log(2), -np.log(2)])
    shift = surrogate_logit(psi, 0.5) - surrogate_logit(psi, -2.0)
    np.testing.assert_allclose(shift, np.full(2, shift[0]))


def test_log_posterior_examples():
    np.testing.assert_allclose(log_posterior(np.zeros(2)), [-np.log(2), -np.log(2)])
    np.testing.assert_allclose(log_posterior(np.array([1.0, 0.0])),
                               [-np.log1p(np.exp(-1)), -1 - np.log1p(np.exp(-1))], rtol=1e-12)
    np.testing.assert_allclose(log_posterior(np.array([1.0, 0.0])), [-0.3133, -1.3133], atol=1e-4)


def test_log_posterior_shift_invariant():
    phi = np.array([0.2, -0.9, 1.4])
    np.testing.assert_allclose(log_posterior(phi + 7.0), log_posterior(phi), rtol=1e-12, atol=1e-14)


def posterior_with(log_post, pi_star=(0.5, 0.5)):
    return NodePosterior(surrogate_logit=np.array(log_post), log_posterior=np.array(log_post),
                         pi_star=np.array(pi_star), bound=0.0)


def test_readout_argmax_and_ties():
    assert readout(posterior_with([-0.3, -1.4])) == 0
    assert readout(posterior_with([-np.log(2), -np.log(2)])) == 0
    assert readout(posterior_with([-np.log(2), -np.log(2)], (0.2, 0.8)), ReadoutMode.VARIATIONAL) == 1
    assert readout(posterior_with([-1.4, -0.3], (0.5, 0.5)), ReadoutMode.VARIATIONAL) == 0


def test_both_readouts_agree_on_dominant_score():
    posterior = node_posterior(np.array([10.0, 0.0]), InferenceConfig(), node_rng(0, (), 0))
    assert readout(posterior, ReadoutMode.POSTERIOR) == 0
    assert readout(posterior, ReadoutMode.VARIATIONAL) == 0


@pytest.mark.parametrize("bound", [-10.0, 0.0, 10.0])
def test_bound_cancels_from_posterior(bound):
    psi = np.random.default_rng(1).standard_normal(6)
    reference = log_posterior(surrogate_logit(psi, 0.0))
    shifted = log_posterior(surrogate_logit(psi, bound))
    np.testing.assert_allclose(shifted, reference, rtol=1e-12, atol=1e-12)
    assert int(np.argmax(shifted)) == int(np.argmax(reference))


def test_posterior_is_normalized():
    rng = np.random.default_rng(2)
    posterior = node_posterior(rng.standard_normal(5), InferenceConfig(samples_infer=20), rng)
    assert np.all(posterior.log_posterior <= 0.0)
    assert logsumexp(posterior.log_posterior) == pytest.approx(0.0, abs=1e-10)


def test_bound_stays_near_log_partition():
    rng = np.random.default_rng(3)
    cfg = InferenceConfig(samples_infer=50, tau=0.5)
    for k in range(100):
        psi = 0.1 * rng.standard_normal(10)
        _, bound = infer_node(psi, cfg, node_rng(3, (), k))
        assert bound <= logsumexp(psi) + 0.2


def test_instance_inference_ignores_worker_count():
    task = TaskConfig(d=4, v_o=3, v_p=2, m_range=(3, 4), n_range=(1, 3), seed=4)
    inst = synth_dataset(task, 1)[0]
    table = compute_marginal_scores(init_theta(4, 3, 2, hidden_sizes=(5,), seed=4), inst)
    cfg = InferenceConfig(samples_infer=20, seed=9)
    serial = infer_instance(table, cfg, (0,), workers=1)
    pooled = infer_instance(table, cfg, (0,), workers=4)
    assert len(serial) == inst.graph.m + inst.graph.n
    for a, b in zip(serial, pooled):
        np.testing.assert_array_equal(a.pi_star, b.pi_star)
        assert a.bound == b.bound


def test_node_streams_differ_by_key():
    a = node_rng(0, (1,), 0).random()
    assert a != node_rng(0, (2,), 0).random()
    assert a != node_rng(0, (1,), 1).random()
    assert a == node_rng(0, (1,), 0).random()

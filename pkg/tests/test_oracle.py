import numpy as np
import pytest

from metagrad.mdp import TabularMdp, exact_value, sample_trajectories
from metagrad.oracle import MAX_PATHS, enumerate_trajectories, expected_estimate

from conftest import random_mdp, tiny_mdp


def test_deterministic_chain_has_one_path():
    P = np.zeros((3, 1, 3))
    for s in range(3):
        P[s, 0, (s + 1) % 3] = 1.0
    mdp = TabularMdp(P, np.ones((3, 1)), 0.9, 4, np.array([1.0, 0, 0]))
    paths = enumerate_trajectories(mdp, np.zeros((3, 1)))
    assert len(paths) == 1
    assert paths.probabilities[0] == 1.0
    assert paths.batch.states.tolist() == [[0, 1, 2, 0]]


def test_bandit_paths_are_policy_products():
    mdp = TabularMdp(np.ones((1, 2, 1)), np.array([[1.0, 0.0]]), 0.9, 2, np.ones(1))
    theta = np.array([[0.4, -0.2]])
    p = np.exp(theta[0]) / np.exp(theta[0]).sum()
    paths = enumerate_trajectories(mdp, theta)
    assert len(paths) == 4
    got = {tuple(a): q for a, q in zip(paths.batch.actions.tolist(), paths.probabilities)}
    for a0 in range(2):
        for a1 in range(2):
            assert np.isclose(got[(a0, a1)], p[a0] * p[a1], rtol=1e-15)


@pytest.mark.parametrize("seed", range(4))
def test_probabilities_sum_to_one_and_returns_match_value(seed):
    mdp = tiny_mdp(seed, 3, 2, 3)
    theta = np.random.default_rng(seed).normal(size=(3, 2))
    paths = enumerate_trajectories(mdp, theta)
    assert abs(paths.probabilities.sum() - 1) <= 1e-12
    disc = mdp.discount ** np.arange(mdp.horizon)
    ev = expected_estimate(paths, lambda b: float((b.rewards[0] * disc).sum()))
    assert abs(ev - exact_value(mdp, theta)) <= 1e-12


def test_constant_zero_estimator():
    mdp = tiny_mdp(0)
    paths = enumerate_trajectories(mdp, np.zeros((2, 2)))
    assert np.all(expected_estimate(paths, lambda b: np.zeros(3)) == 0)


def test_guard_rejects_large_instances():
    mdp = random_mdp(0, n_states=10, n_actions=10, horizon=4)
    assert (10 * 10) ** 4 > MAX_PATHS
    with pytest.raises(ValueError):
        enumerate_trajectories(mdp, np.zeros((10, 10)))


def test_enumeration_matches_sampling_frequencies():
    mdp = tiny_mdp(3, 2, 2, 2)
    theta = np.random.default_rng(3).normal(size=(2, 2))
    paths = enumerate_trajectories(mdp, theta)
    n = 10**5
    batch = sample_trajectories(mdp, theta, n, 0)
    key = lambda s, a: tuple(s) + tuple(a)  # noqa: E731
    counts = {}
    for s, a in zip(batch.states.tolist(), batch.actions.tolist()):
        counts[key(s, a)] = counts.get(key(s, a), 0) + 1
    for s, a, p in zip(paths.batch.states.tolist(), paths.batch.actions.tolist(),
                       paths.probabilities):
        assert abs(counts.get(key(s, a), 0) / n - p) <= 4 / np.sqrt(n)
    assert len(counts) <= len(paths)

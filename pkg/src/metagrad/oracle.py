"""Exhaustive trajectory enumeration for tiny MDPs.

Used as ground truth in tests: the probability-weighted average of a
batch-size-1 estimator over every trajectory is its exact expectation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import TabularMdp, TrajectoryBatch, log_policy_probs

__all__ = ["EnumeratedTrajectorySet", "enumerate_trajectories", "expected_estimate", "MAX_PATHS"]

MAX_PATHS = 10**6


@dataclass(frozen=True, eq=False)
class EnumeratedTrajectorySet:
    batch: TrajectoryBatch
    probabilities: np.ndarray

    def __len__(self):
        return len(self.probabilities)


def enumerate_trajectories(mdp: TabularMdp, theta) -> EnumeratedTrajectorySet:
    S, A, H = mdp.n_states, mdp.n_actions, mdp.horizon
    if float(S * A) ** H > MAX_PATHS:
        raise ValueError(f"(n_states * n_actions)^horizon = {S * A}^{H} exceeds {MAX_PATHS}")
    logpi = log_policy_probs(theta)
    pi = np.exp(logpi)

    # each partial path: (states, actions, probability of prefix incl. current state)
    paths = [((s,), (), mdp.initial_dist[s]) for s in range(S) if mdp.initial_dist[s] > 0]
    for t in range(H):
        grown = []
        for states, actions, p in paths:
            s = states[-1]
            for a in range(A):
                pa = p * pi[s, a]
                if pa <= 0:
                    continue
                if t + 1 == H:
                    grown.append((states, actions + (a,), pa))
                    continue
                for s2 in np.flatnonzero(mdp.transition[s, a] > 0):
                    grown.append((states + (int(s2),), actions + (a,), pa * mdp.transition[s, a, s2]))
        paths = grown

    states = np.array([p[0] for p in paths], dtype=np.int64)
    actions = np.array([p[1] for p in paths], dtype=np.int64)
    probs = np.array([p[2] for p in paths])
    batch = TrajectoryBatch(states, actions, mdp.reward[states, actions],
                            logpi[states, actions], mdp.discount)
    return EnumeratedTrajectorySet(batch, probs)


def expected_estimate(traj_set: EnumeratedTrajectorySet, estimator):
    """Sum over trajectories of probability * estimator(single-trajectory batch)."""
    total = None
    for i, p in enumerate(traj_set.probabilities):
        value = np.asarray(estimator(traj_set.batch.subset([i])), dtype=np.float64)
        total = p * value if total is None else total + p * value
    return total

"""Tabular finite-horizon MDPs with softmax policies.

Everything here is exact: values, policy gradients, policy Hessians and the
mixed reward/policy Jacobian come from forward/backward dynamic programming,
not from sampling or finite differences.  Parameters are ``[n_states, n_actions]``
logit matrices; all derivative algebra uses their row-major flattening.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "TabularMdp",
    "Trajectory",
    "TrajectoryBatch",
    "generate_random_mdp",
    "policy_probs",
    "log_policy_probs",
    "sample_trajectories",
    "exact_value",
    "exact_policy_gradient",
    "exact_policy_hessian",
    "exact_reward_jacobian",
    "state_values",
    "noisy_value_table",
]


@dataclass(frozen=True, eq=False)
class TabularMdp:
    transition: np.ndarray  # [S, A, S]
    reward: np.ndarray  # [S, A]
    discount: float
    horizon: int
    initial_dist: np.ndarray  # [S]

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=np.float64)
        R = np.asarray(self.reward, dtype=np.float64)
        rho = np.asarray(self.initial_dist, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must be [S, A, S], got {P.shape}")
        S, A, _ = P.shape
        if R.shape != (S, A):
            raise ValueError(f"reward must be {(S, A)}, got {R.shape}")
        if rho.shape != (S,):
            raise ValueError(f"initial_dist must be ({S},), got {rho.shape}")
        if np.any(P < 0) or np.max(np.abs(P.sum(-1) - 1.0)) > 1e-12:
            raise ValueError("transition rows must be probability vectors")
        if np.any(rho < 0) or abs(rho.sum() - 1.0) > 1e-12:
            raise ValueError("initial_dist must be a probability vector")
        if not np.all(np.isfinite(R)):
            raise ValueError("reward entries must be finite")
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")
        if int(self.horizon) < 1:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        for name, arr in (("transition", P), ("reward", R), ("initial_dist", rho)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "discount", float(self.discount))
        object.__setattr__(self, "horizon", int(self.horizon))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_params(self) -> int:
        return self.n_states * self.n_actions

    def with_reward(self, reward: np.ndarray) -> "TabularMdp":
        return TabularMdp(self.transition, reward, self.discount, self.horizon, self.initial_dist)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "discount": self.discount,
            "horizon": self.horizon,
            "transition": self.transition.ravel().tolist(),
            "reward": self.reward.ravel().tolist(),
            "initial_dist": self.initial_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TabularMdp":
        S, A = int(data["n_states"]), int(data["n_actions"])
        return cls(
            transition=np.asarray(data["transition"], dtype=np.float64).reshape(S, A, S),
            reward=np.asarray(data["reward"], dtype=np.float64).reshape(S, A),
            discount=float(data["discount"]),
            horizon=int(data["horizon"]),
            initial_dist=np.asarray(data["initial_dist"], dtype=np.float64),
        )

    def to_json(self) -> str:
        # repr-exact float round trip via json
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        return cls.from_dict(json.loads(text))


def generate_random_mdp(seed, n_states=20, n_actions=5, density=0.001, horizon=20, discount=0.8):
    """Random MDP with Dirichlet(density) transition rows and U[0, 1] rewards.

    The initial state distribution is uniform.  Output is a pure function of
    the arguments.
    """
    if n_states < 1 or n_actions < 1:
        raise ValueError("n_states and n_actions must be positive")
    if not density > 0:
        raise ValueError(f"density must be positive, got {density}")
    if horizon < 1:
        raise ValueError(f"horizon must be positive, got {horizon}")
    if not 0.0 < discount < 1.0:
        raise ValueError(f"discount must lie in (0, 1), got {discount}")
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(n_states, float(density)), size=(n_states, n_actions))
    P = P / P.sum(-1, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    rho = np.full(n_states, 1.0 / n_states)
    return TabularMdp(P, R, discount, horizon, rho)


def policy_probs(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    z = theta - theta.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_policy_probs(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    z = theta - theta.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    log_probs: Optional[np.ndarray] = None

    @property
    def steps(self):
        return list(zip(self.states.tolist(), self.actions.tolist(), self.rewards.tolist()))

    def __len__(self):
        return len(self.states)


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """A batch of equal-length trajectories stored as ``[n, horizon]`` arrays.

    ``log_probs`` holds the behaviour policy's per-step action log-probabilities
    when known (always filled by :func:`sample_trajectories`).
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    log_probs: Optional[np.ndarray] = None
    discount: Optional[float] = None

    def __len__(self):
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    def __getitem__(self, i) -> Trajectory:
        lp = None if self.log_probs is None else self.log_probs[i]
        return Trajectory(self.states[i], self.actions[i], self.rewards[i], lp)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, index) -> "TrajectoryBatch":
        index = np.asarray(index)
        if index.size == 0:
            index = index.astype(np.intp)
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return TrajectoryBatch(pick(self.states), pick(self.actions), pick(self.rewards),
                               pick(self.log_probs), self.discount)

    @classmethod
    def from_trajectories(cls, trajectories, discount=None) -> "TrajectoryBatch":
        trajectories = list(trajectories)
        if not trajectories:
            raise ValueError("empty trajectory list")
        lps = [t.log_probs for t in trajectories]
        log_probs = None if any(lp is None for lp in lps) else np.stack(lps)
        return cls(
            np.stack([t.states for t in trajectories]),
            np.stack([t.actions for t in trajectories]),
            np.stack([t.rewards for t in trajectories]),
            log_probs,
            discount,
        )


def _draw(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    # inverse-CDF draw, one categorical per row
    idx = (u[:, None] >= cdf_rows).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def sample_trajectories(mdp: TabularMdp, theta, n: int, seed) -> TrajectoryBatch:
    """Roll out ``n`` i.i.d. trajectories of ``mdp.horizon`` steps under softmax(theta)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pi = policy_probs(theta)
    logpi = log_policy_probs(theta)
    pi_cdf = np.cumsum(pi, axis=1)
    p_cdf = np.cumsum(mdp.transition, axis=2)
    rho_cdf = np.cumsum(mdp.initial_dist)
    H = mdp.horizon
    states = np.empty((n, H), dtype=np.int64)
    actions = np.empty((n, H), dtype=np.int64)
    s = _draw(np.broadcast_to(rho_cdf, (n, rho_cdf.size)), rng.random(n))
    for t in range(H):
        a = _draw(pi_cdf[s], rng.random(n))
        states[:, t] = s
        actions[:, t] = a
        if t + 1 < H:
            s = _draw(p_cdf[s, a], rng.random(n))
    rewards = mdp.reward[states, actions]
    return TrajectoryBatch(states, actions, rewards, logpi[states, actions], mdp.discount)


def _resolve_reward(mdp, reward_override):
    if reward_override is None:
        return mdp.reward
    R = np.asarray(reward_override, dtype=np.float64)
    if R.shape != mdp.reward.shape:
        raise ValueError(f"reward_override must have shape {mdp.reward.shape}, got {R.shape}")
    return R


def _forward_dists(mdp, pi):
    """State distributions d_t for t = 0..H-1, shape [H, S]."""
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    d = np.empty((mdp.horizon, mdp.n_states))
    d[0] = mdp.initial_dist
    for t in range(1, mdp.horizon):
        d[t] = d[t - 1] @ P_pi
    return d, P_pi


def _backward_values(mdp, pi, R):
    """Value-to-go V_t [H+1, S] and Q_t [H, S, A] with relative discounting."""
    H, S = mdp.horizon, mdp.n_states
    V = np.zeros((H + 1, S))
    Q = np.empty((H, S, mdp.n_actions))
    for t in range(H - 1, -1, -1):
        Q[t] = R + mdp.discount * mdp.transition @ V[t + 1]
        V[t] = (pi * Q[t]).sum(-1)
    return V, Q


def exact_value(mdp: TabularMdp, theta, reward_override=None) -> float:
    R = _resolve_reward(mdp, reward_override)
    pi = policy_probs(theta)
    d, _ = _forward_dists(mdp, pi)
    disc = mdp.discount ** np.arange(mdp.horizon)
    return float(np.einsum("t,ts,sa,sa->", disc, d, pi, R))


def state_values(mdp: TabularMdp, theta, reward_override=None) -> np.ndarray:
    """Full-horizon value V_0(s) of starting in each state."""
    R = _resolve_reward(mdp, reward_override)
    V, _ = _backward_values(mdp, policy_probs(theta), R)
    return V[0]


def exact_policy_gradient(mdp: TabularMdp, theta, reward_override=None) -> np.ndarray:
    """Gradient of :func:`exact_value` with respect to the flattened logits.

    Uses grad[s, b] = sum_t gamma^t d_t(s) pi(b|s) (Q_t(s, b) - V_t(s)).
    """
    R = _resolve_reward(mdp, reward_override)
    pi = policy_probs(theta)
    d, _ = _forward_dists(mdp, pi)
    V, Q = _backward_values(mdp, pi, R)
    disc = mdp.discount ** np.arange(mdp.horizon)
    adv = Q - V[:-1, :, None]
    return np.einsum("t,ts,sa,tsa->sa", disc, d, pi, adv).ravel()


def _dpi(pi):
    """d pi(a|s) / d theta(s', b) restricted to s' = s: array [S, A(b), A(a)]."""
    A = pi.shape[1]
    return pi[:, None, :] * (np.eye(A)[None] - pi[:, :, None])


def _forward_dist_jacobians(mdp, pi, d, P_pi):
    """Dd[t, j, s] = d d_t(s) / d theta_j, shape [H, SA, S]."""
    S, A, H = mdp.n_states, mdp.n_actions, mdp.horizon
    # dP_pi(s, s') / dtheta(s, b) = pi(b|s) (P(s, b, s') - P_pi(s, s'))
    dP = pi[:, :, None] * (mdp.transition - P_pi[:, None, :])  # [S, A, S']
    Dd = np.zeros((H, S * A, S))
    for t in range(1, H):
        Dd[t] = Dd[t - 1] @ P_pi + (d[t - 1][:, None, None] * dP).reshape(S * A, S)
    return Dd


def _backward_value_jacobians(mdp, pi, V, Q):
    """DV[t, j, s] = d V_t(s) / d theta_j, shape [H+1, SA, S]."""
    S, A, H = mdp.n_states, mdp.n_actions, mdp.horizon
    gam = mdp.discount
    local = pi * (Q - V[:-1, :, None])  # [H, S, A]
    DV = np.zeros((H + 1, S * A, S))
    P_flat = mdp.transition.reshape(S * A, S)
    idx = np.arange(S * A)
    rows_state = idx // A
    for t in range(H - 1, -1, -1):
        DQ = gam * (DV[t + 1] @ P_flat.T).reshape(S * A, S, A)
        DV[t] = np.einsum("sa,jsa->js", pi, DQ)
        DV[t][idx, rows_state] += local[t].ravel()
    return DV


def exact_policy_hessian(mdp: TabularMdp, theta, reward_override=None) -> np.ndarray:
    """Hessian of :func:`exact_value` in the flattened logits, ``[d, d]``.

    Differentiates grad_i = sum_t gamma^t d_t(s_i) G_t[i] with
    G_t[(s, b)] = pi(b|s) (Q_t(s, b) - V_t(s)), using forward Jacobians of the
    state distributions and backward Jacobians of the value-to-go.
    """
    R = _resolve_reward(mdp, reward_override)
    S, A, H = mdp.n_states, mdp.n_actions, mdp.horizon
    gam = mdp.discount
    n = S * A
    pi = policy_probs(theta)
    d, P_pi = _forward_dists(mdp, pi)
    V, Q = _backward_values(mdp, pi, R)
    Dd = _forward_dist_jacobians(mdp, pi, d, P_pi)
    DV = _backward_value_jacobians(mdp, pi, V, Q)
    dpi = _dpi(pi)  # [S, c, b]
    P_flat = mdp.transition.reshape(n, S)
    rows_state = np.arange(n) // A

    Hmat = np.zeros((n, n))
    for t in range(H):
        adv = Q[t] - V[t][:, None]  # [S, A]
        G = (pi * adv).ravel()  # [n]
        # d G[(s,b)] / d theta_j
        DQ = gam * (DV[t + 1] @ P_flat.T)  # [j, (s,b)]
        DG = pi.ravel()[None, :] * (DQ - DV[t][:, rows_state])  # [j, i]
        # policy-derivative part, nonzero only for j = (s, c)
        blocks = dpi * adv[:, None, :]  # [s, c, b]
        for s in range(S):
            DG[s * A:(s + 1) * A, s * A:(s + 1) * A] += blocks[s]
        Hmat += gam ** t * (Dd[t][:, rows_state] * G[None, :] + d[t][rows_state][None, :] * DG)
    # Hmat[j, i] = d grad_i / d theta_j
    return 0.5 * (Hmat + Hmat.T)


def exact_reward_jacobian(mdp: TabularMdp, theta, reward_override=None) -> np.ndarray:
    """Mixed derivative d^2 V / d phi d theta for reward R + phi, shape [d_phi, d_theta].

    V is linear in the reward, so dV/dphi(s, a) is the discounted occupancy
    omega(s, a) = sum_t gamma^t d_t(s) pi(a|s); the result is d omega / d theta
    and does not depend on the reward (the override only gets shape-checked).
    """
    _resolve_reward(mdp, reward_override)
    S, A, H = mdp.n_states, mdp.n_actions, mdp.horizon
    n = S * A
    pi = policy_probs(theta)
    d, P_pi = _forward_dists(mdp, pi)
    Dd = _forward_dist_jacobians(mdp, pi, d, P_pi)
    disc = mdp.discount ** np.arange(H)
    occ = np.einsum("t,ts->s", disc, d)
    docc = np.einsum("t,tjs->js", disc, Dd)  # [j, s]
    # J[(s,a), j] = docc[j, s] pi(a|s) + occ(s) dpi(a|s)/dtheta_j
    J = (docc[:, :, None] * pi[None, :, :]).reshape(n, n).T
    dpi = _dpi(pi)  # [s, b, a]
    for s in range(S):
        J[s * A:(s + 1) * A, s * A:(s + 1) * A] += occ[s] * dpi[s].T
    return J


def noisy_value_table(mdp: TabularMdp, theta, noise_coefficient: float = 1.0, seed=None,
                      reward_override=None) -> np.ndarray:
    """Exact full-horizon state values plus N(0, noise_coefficient^2) noise.

    Stands in for a learned critic; the noise is fresh for every seed.
    """
    if noise_coefficient < 0:
        raise ValueError(f"noise_coefficient must be non-negative, got {noise_coefficient}")
    values = state_values(mdp, theta, reward_override)
    if noise_coefficient == 0:
        return values
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return values + noise_coefficient * rng.standard_normal(values.shape)

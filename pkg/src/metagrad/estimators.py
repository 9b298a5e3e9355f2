"""Score-function estimators of policy gradients, Hessians and reward Jacobians.

All estimators use the causal (return-to-go) form.  For a softmax tabular
policy the per-step score is ``e_(s,a) - pi(.|s)`` on row ``s`` of the logit
matrix, and the per-step log-prob Hessian ``-(diag(pi_s) - pi_s pi_s^T)`` is a
block on the diagonal that depends on the state only.  Both are exploited to
keep everything as batched array algebra.

Hessian forms per trajectory (G_t return-to-go, A_t = G_t - gamma^t b(s_t),
cumulative score S_t = sum_{t' <= t} s_t', cumulative log-prob Hessian L_t):

* DiCE        sum_t gamma^t r_t (L_t + S_t S_t^T)
* LoadedDiCE  sum_t A_t (l_t + S_t S_t^T - S_{t-1} S_{t-1}^T)
* LVC         sum_t A_t (l_t + s_t s_t^T)
* AD          sum_t A_t l_t

where ``l_t`` is the per-step log-prob Hessian.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .mdp import TrajectoryBatch, log_policy_probs, policy_probs

__all__ = [
    "Kind",
    "EstimatorKind",
    "GradEstimate",
    "HessianEstimate",
    "JacobianEstimate",
    "estimate_policy_gradient",
    "estimate_hessian",
    "estimate_reward_jacobian",
    "importance_weighted_gradient",
]

# rows of trajectories per dense block in the DiCE / Loaded-DiCE Hessians
_CHUNK = 512


class Kind(str, enum.Enum):
    EXACT = "exact"
    DICE = "dice"
    LOADED_DICE = "loaded_dice"
    LVC = "lvc"
    AD = "ad"


@dataclass(frozen=True)
class EstimatorKind:
    kind: Kind
    batch_size: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind is Kind.EXACT:
            if self.batch_size is not None:
                raise ValueError("the exact estimator carries no batch size")
        elif self.batch_size is None or int(self.batch_size) < 1:
            raise ValueError(f"{self.kind.value} needs a positive batch_size")

    @property
    def is_exact(self) -> bool:
        return self.kind is Kind.EXACT

    @classmethod
    def exact(cls) -> "EstimatorKind":
        return cls(Kind.EXACT)

    def __str__(self):
        return self.kind.value if self.is_exact else f"{self.kind.value}[{self.batch_size}]"


@dataclass(frozen=True)
class GradEstimate:
    value: np.ndarray
    batch_size: int
    kind: Kind


@dataclass(frozen=True)
class HessianEstimate:
    value: np.ndarray
    batch_size: int
    kind: Kind


@dataclass(frozen=True)
class JacobianEstimate:
    value: np.ndarray
    batch_size: int
    kind: Kind


def _kind(kind) -> Kind:
    if isinstance(kind, EstimatorKind):
        return kind.kind
    return Kind(kind)


def _check_batch(batch: TrajectoryBatch, theta, horizon=None):
    if len(batch) == 0:
        raise ValueError("empty trajectory batch")
    if horizon is not None and batch.horizon != horizon:
        raise ValueError(f"batch horizon {batch.horizon} != expected {horizon}")
    if batch.discount is None:
        raise ValueError("batch carries no discount factor")
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 2:
        raise ValueError("theta must be an [n_states, n_actions] matrix")
    return theta


def _discounts(horizon, discount):
    return discount ** np.arange(horizon)


def _returns_to_go(x):
    """Reverse cumulative sum along the time axis."""
    return np.cumsum(x[:, ::-1], axis=1)[:, ::-1]


def _advantages(batch, disc, baseline, rewards):
    G = _returns_to_go(rewards * disc)
    if baseline is None:
        return G
    b = np.asarray(baseline, dtype=np.float64)
    return G - disc * b[batch.states]


def _rewards(batch, reward_override):
    if reward_override is None:
        return batch.rewards
    return np.asarray(reward_override, dtype=np.float64)[batch.states, batch.actions]


def _sa_sums(batch, weights, S, A):
    """W[s, a] = sum of weights over steps with (s_t, a_t) = (s, a)."""
    idx = (batch.states * A + batch.actions).ravel()
    return np.bincount(idx, weights=np.ravel(weights), minlength=S * A).reshape(S, A)


def _scatter_scores(batch, pi, weights):
    """sum over (n, t) of weights[n, t] * s_t, as an [S, A] matrix."""
    W = _sa_sums(batch, weights, *pi.shape)
    return W - W.sum(1, keepdims=True) * pi


def _dense_scores(states, actions, pi):
    """Score vectors for a [m, H] block, shape [m, H, S*A]."""
    S, A = pi.shape
    m, H = states.shape
    sc = np.zeros((m, H, S, A))
    ii, tt = np.meshgrid(np.arange(m), np.arange(H), indexing="ij")
    sc[ii, tt, states] -= pi[states]
    sc[ii, tt, states, actions] += 1.0
    return sc.reshape(m, H, S * A)


def _state_block_sum(states, weights, pi):
    """sum_t w_t l(s_t): block diagonal with -(diag(pi_s) - pi_s pi_s^T) per state."""
    S, A = pi.shape
    w_state = np.bincount(states.ravel(), weights=np.ravel(weights), minlength=S)
    blocks = -(np.einsum("sa,ab->sab", pi, np.eye(A)) - pi[:, :, None] * pi[:, None, :])
    return _block_diag(w_state[:, None, None] * blocks)


def _block_diag(blocks):
    S, A, _ = blocks.shape
    out = np.zeros((S * A, S * A))
    for s in range(S):
        out[s * A:(s + 1) * A, s * A:(s + 1) * A] = blocks[s]
    return out


def _step_outer_sum(batch, weights, pi):
    """sum_t w_t s_t s_t^T, block diagonal since s_t lives on row s_t."""
    S, A = pi.shape
    W = _sa_sums(batch, weights, S, A)
    Ws = W.sum(1)
    # (e_a - pi)(e_a - pi)^T summed with weights, expanded per state
    blocks = (np.einsum("sa,ab->sab", W, np.eye(A))
              - W[:, :, None] * pi[:, None, :]
              - pi[:, :, None] * W[:, None, :]
              + Ws[:, None, None] * pi[:, :, None] * pi[:, None, :])
    return _block_diag(blocks)


def estimate_policy_gradient(kind, batch: TrajectoryBatch, theta, baseline=None,
                             reward_override=None) -> GradEstimate:
    """Batch-mean score-function gradient.

    DiCE uses raw returns-to-go (REINFORCE); the other kinds share the
    actor-critic form sum_t s_t A_t with the supplied state baseline.
    """
    k = _kind(kind)
    if k is Kind.EXACT:
        raise ValueError("the exact gradient lives in metagrad.mdp")
    theta = _check_batch(batch, theta)
    pi = policy_probs(theta)
    disc = _discounts(batch.horizon, batch.discount)
    rewards = _rewards(batch, reward_override)
    adv = _advantages(batch, disc, None if k is Kind.DICE else baseline, rewards)
    g = _scatter_scores(batch, pi, adv) / len(batch)
    return GradEstimate(g.ravel(), len(batch), k)


def estimate_hessian(kind, batch: TrajectoryBatch, theta, baseline=None,
                     reward_override=None) -> HessianEstimate:
    """Batch-mean Hessian estimate of the expected return; see module docstring."""
    k = _kind(kind)
    if k is Kind.EXACT:
        raise ValueError("the exact Hessian lives in metagrad.mdp")
    theta = _check_batch(batch, theta)
    pi = policy_probs(theta)
    H = batch.horizon
    disc = _discounts(H, batch.discount)
    rewards = _rewards(batch, reward_override)
    n = len(batch)

    if k is Kind.DICE:
        c = rewards * disc
        # sum_t c_t Lbar_t = sum_t l(s_t) * (sum_{t' >= t} c_t')
        out = _state_block_sum(batch.states, _returns_to_go(c), pi)
        out += _dense_quadratic(batch, pi, c, cumulative=True)
    else:
        adv = _advantages(batch, disc, baseline, rewards)
        out = _state_block_sum(batch.states, adv, pi)
        if k is Kind.LVC:
            out += _step_outer_sum(batch, adv, pi)
        elif k is Kind.LOADED_DICE:
            # S_t S_t^T - S_{t-1} S_{t-1}^T = s_t s_t^T + s_t S_{t-1}^T + S_{t-1} s_t^T
            out += _step_outer_sum(batch, adv, pi)
            cross = _dense_quadratic(batch, pi, adv, cumulative=False)
            out += cross + cross.T
    out /= n
    return HessianEstimate(0.5 * (out + out.T), n, k)


def _dense_quadratic(batch, pi, weights, cumulative):
    """cumulative: sum_t w_t S_t S_t^T.  otherwise: sum_t w_t s_t S_{t-1}^T."""
    d = pi.size
    out = np.zeros((d, d))
    for lo in range(0, len(batch), _CHUNK):
        hi = min(lo + _CHUNK, len(batch))
        sc = _dense_scores(batch.states[lo:hi], batch.actions[lo:hi], pi)
        cum = np.cumsum(sc, axis=1)
        w = weights[lo:hi]
        if cumulative:
            X = cum * w[:, :, None]
            out += X.reshape(-1, d).T @ cum.reshape(-1, d)
        else:
            prev = np.zeros_like(cum)
            prev[:, 1:] = cum[:, :-1]
            X = sc * w[:, :, None]
            out += X.reshape(-1, d).T @ prev.reshape(-1, d)
    return out


def estimate_reward_jacobian(kind, batch: TrajectoryBatch, theta, baseline=None) -> JacobianEstimate:
    """Batch mean of sum_t dG_t/dphi (x) s_t, shape [d_phi, d_theta].

    dG_t/dphi(s, a) = sum_{t' >= t} gamma^t' 1[s_t' = s, a_t' = a].  The baseline
    does not depend on phi, so every stochastic kind shares this form.
    """
    k = _kind(kind)
    if k is Kind.EXACT:
        raise ValueError("the exact Jacobian lives in metagrad.mdp")
    theta = _check_batch(batch, theta)
    pi = policy_probs(theta)
    S, A = pi.shape
    d = S * A
    disc = _discounts(batch.horizon, batch.discount)
    out = np.zeros((d, d))
    # sum_t s_t (sum_{t'>=t} gamma^t' e_t')^T = sum_t' gamma^t' e_t' Sbar_t'^T
    for lo in range(0, len(batch), _CHUNK):
        hi = min(lo + _CHUNK, len(batch))
        st, at = batch.states[lo:hi], batch.actions[lo:hi]
        cum = np.cumsum(_dense_scores(st, at, pi), axis=1)  # [m, H, d]
        rows = (st * A + at).ravel()
        onehot = np.zeros((rows.size, d))
        onehot[np.arange(rows.size), rows] = 1.0
        out += onehot.T @ (cum * disc[None, :, None]).reshape(-1, d)
    return JacobianEstimate(out / len(batch), len(batch), k)


def importance_weighted_gradient(batch_from_mu: TrajectoryBatch, theta, clip=None,
                                 reward_override=None) -> GradEstimate:
    """Off-policy first-order estimate with product-form importance ratios.

    Each discounted reward gamma^t r_t is weighted by prod_{t' <= t} pi/mu; the
    result is sum_t s_t sum_{t' >= t} w_t' gamma^t' r_t'.  ``clip`` caps every
    per-step ratio before the product.
    """
    theta = _check_batch(batch_from_mu, theta)
    if batch_from_mu.log_probs is None:
        raise ValueError("behaviour log-probabilities are required")
    pi = policy_probs(theta)
    logpi = log_policy_probs(theta)[batch_from_mu.states, batch_from_mu.actions]
    ratio = np.exp(logpi - batch_from_mu.log_probs)
    if clip is not None:
        ratio = np.minimum(ratio, clip)
    w = np.cumprod(ratio, axis=1)
    disc = _discounts(batch_from_mu.horizon, batch_from_mu.discount)
    rewards = _rewards(batch_from_mu, reward_override)
    G = _returns_to_go(w * rewards * disc)
    g = _scatter_scores(batch_from_mu, pi, G) / len(batch_from_mu)
    return GradEstimate(g.ravel(), len(batch_from_mu), Kind.DICE)

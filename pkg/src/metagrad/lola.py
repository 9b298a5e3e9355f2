"""LOLA with DiCE gradients on the iterated prisoner's dilemma.

Each agent plays a memory-1 policy: five logits, one per own-perspective
state ``2*own + other`` of the previous joint action plus the initial state 4.
Action 1 is cooperation and is taken with probability ``sigmoid(logit)``.
Payoffs are indexed ``[own_action][other_action]``, so mutual cooperation
pays -1 each, mutual defection -2, and a lone defector gets 0 against -3.

Exact values come from the 4-state joint-action Markov chain; stochastic ones
from causal DiCE surrogates with per-state value baselines, optionally
reweighted by cumulative joint importance ratios over replayed rollouts.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

__all__ = [
    "IpdGame",
    "Memory1Policy",
    "IpdBatch",
    "ReplayBuffer",
    "DiceGrads",
    "LolaPaths",
    "LolaConfig",
    "LolaState",
    "LolaRun",
    "exact_joint_value",
    "exact_value_gradients",
    "expected_step_return",
    "rollout",
    "dice_grads",
    "importance_weights",
    "off_policy_dice_grads",
    "lola_step",
    "run_lola_experiment",
]

INITIAL_STATE = 4
N_LOGITS = 5
# own-perspective state -> the other agent's view of the same joint action
_SWAP = np.array([0, 2, 1, 3, 4])
_PD = np.array([[-2.0, 0.0], [-3.0, -1.0]])


@dataclass(frozen=True, eq=False)
class IpdGame:
    payoff_1: np.ndarray = field(default_factory=lambda: _PD.copy())
    payoff_2: np.ndarray = field(default_factory=lambda: _PD.copy())
    discount: float = 0.96
    rollout_length: int = 100

    def __post_init__(self):
        for name in ("payoff_1", "payoff_2"):
            p = np.asarray(getattr(self, name), dtype=np.float64)
            if p.shape != (2, 2) or not np.all(np.isfinite(p)):
                raise ValueError(f"{name} must be a finite 2x2 matrix")
            object.__setattr__(self, name, p)
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")
        if self.rollout_length < 1:
            raise ValueError("rollout_length must be positive")

    def swapped(self) -> "IpdGame":
        return replace(self, payoff_1=self.payoff_2, payoff_2=self.payoff_1)


@dataclass(frozen=True, eq=False)
class Memory1Policy:
    logits: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.logits, dtype=np.float64).reshape(-1)
        if x.shape != (N_LOGITS,) or not np.all(np.isfinite(x)):
            raise ValueError("a memory-1 policy needs 5 finite logits")
        object.__setattr__(self, "logits", x)

    @classmethod
    def uniform(cls) -> "Memory1Policy":
        return cls(np.zeros(N_LOGITS))

    @property
    def cooperate_prob(self) -> np.ndarray:
        return _sigmoid(self.logits)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def _logits(policy) -> np.ndarray:
    if isinstance(policy, Memory1Policy):
        return policy.logits
    return Memory1Policy(policy).logits


# ---------------------------------------------------------------------------
# exact chain


def _transition_derivatives(own, other):
    """Context-to-joint-action table T[c, j] with first and second derivatives.

    Context c is the own-perspective previous state (4 is the start); j is the
    next joint action ``2*a_own + a_other``.  Derivatives are taken with
    respect to ``x = [own logits, other logits]``.
    """
    q1, q2 = _sigmoid(own), _sigmoid(other)
    v1, v2 = q1 * (1 - q1), q2 * (1 - q2)
    c1, c2 = q1, q2[_SWAP]                      # P(cooperate) in each context
    a1 = np.array([0, 0, 1, 1])
    a2 = np.array([0, 1, 0, 1])
    f1 = np.where(a1 == 1, c1[:, None], 1 - c1[:, None])     # [5, 4]
    f2 = np.where(a2 == 1, c2[:, None], 1 - c2[:, None])
    s1 = np.where(a1 == 1, 1.0, -1.0)
    s2 = np.where(a2 == 1, 1.0, -1.0)
    T = f1 * f2

    dT = np.zeros((10, 5, 4))
    d2T = np.zeros((10, 10, 5, 4))
    for k in range(N_LOGITS):
        c = k                       # own logit k acts in context k
        dT[k, c] = s1 * v1[k] * f2[c]
        d2T[k, k, c] = s1 * v1[k] * (1 - 2 * q1[k]) * f2[c]
        m = _SWAP[k]                # other logit m acts in context k as well
        d2T[k, 5 + m, c] = s1 * v1[k] * s2 * v2[m]
        d2T[5 + m, k, c] = d2T[k, 5 + m, c]
    for m in range(N_LOGITS):
        c = _SWAP[m]
        dT[5 + m, c] = f1[c] * s2 * v2[m]
        d2T[5 + m, 5 + m, c] = f1[c] * s2 * v2[m] * (1 - 2 * q2[m])
    return T, dT, d2T


def _joint_rewards(game: IpdGame):
    a1 = np.array([0, 0, 1, 1])
    a2 = np.array([0, 1, 0, 1])
    return game.payoff_1[a1, a2], game.payoff_2[a2, a1]


def _discounted_derivatives(game: IpdGame, own, other, order=2):
    """Unnormalized discounted values of both agents and their derivatives.

    Returns ``(U, grads, hessians)`` with shapes [2], [2, 10], [2, 10, 10],
    ordered (own agent, other agent) with parameters ``[own, other]``.
    """
    g = game.discount
    T, dT, d2T = _transition_derivatives(own, other)
    p0, M = T[INITIAL_STATE], T[:4]
    dp0, dM = dT[:, INITIAL_STATE], dT[:, :4]
    Z = np.linalg.inv(np.eye(4) - g * M)
    y = p0 @ Z
    ydM = np.einsum("i,kij->kj", y, dM)
    U, grads, hess = [], [], []
    for r in _joint_rewards(game):
        z = Z @ r
        U.append(p0 @ z)
        grads.append(dp0 @ z + g * ydM @ z)
        if order < 2:
            continue
        Zdz = (Z @ np.einsum("kij,j->ki", dM, z).T).T           # [10, 4]
        cross = dp0 @ Zdz.T + g * ydM @ Zdz.T
        H = (np.einsum("klj,j->kl", d2T[:, :, INITIAL_STATE], z)
             + g * np.einsum("i,klij,j->kl", y, d2T[:, :, :4], z)
             + g * (cross + cross.T))
        hess.append(H)
    return np.array(U), np.array(grads), (np.array(hess) if order >= 2 else None)


def exact_joint_value(game: IpdGame, policy_1, policy_2):
    """Per-step normalized discounted values ``(1 - gamma) p0^T (I - gamma M)^-1 r``."""
    U, _, _ = _discounted_derivatives(game, _logits(policy_1), _logits(policy_2), order=1)
    scale = 1.0 - game.discount
    return float(scale * U[0]), float(scale * U[1])


def exact_value_gradients(game: IpdGame, policy_1, policy_2, normalized=True):
    """Gradient of v1 in the agent-1 logits, of v2 in the agent-2 logits, and
    the mixed derivative of v2 laid out ``[agent-1 logit, agent-2 logit]``.

    ``normalized=False`` returns derivatives of the plain discounted sum
    instead of the per-step value.
    """
    _, G, H = _discounted_derivatives(game, _logits(policy_1), _logits(policy_2))
    scale = (1.0 - game.discount) if normalized else 1.0
    return scale * G[0, :5], scale * G[1, 5:], scale * H[1, :5, 5:]


def expected_step_return(game: IpdGame, policy_1, policy_2, horizon: Optional[int] = None):
    """Exact expected undiscounted reward per step over a finite rollout."""
    horizon = game.rollout_length if horizon is None else horizon
    T, _, _ = _transition_derivatives(_logits(policy_1), _logits(policy_2))
    p, M = T[INITIAL_STATE], T[:4]
    r1, r2 = _joint_rewards(game)
    total = np.zeros(2)
    for _ in range(horizon):
        total += (p @ r1, p @ r2)
        p = p @ M
    return total / horizon


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True, eq=False)
class IpdBatch:
    """Joint rollouts; every array is [batch, time].

    ``states_i`` is agent i's own-perspective state before acting and
    ``log_probs_i`` the behavior log-probability of its action.
    """

    states_1: np.ndarray
    states_2: np.ndarray
    actions_1: np.ndarray
    actions_2: np.ndarray
    rewards_1: np.ndarray
    rewards_2: np.ndarray
    log_probs_1: Optional[np.ndarray]
    log_probs_2: Optional[np.ndarray]
    discount: float

    def __len__(self):
        return self.states_1.shape[0]

    @property
    def horizon(self) -> int:
        return self.states_1.shape[1]

    def subset(self, index) -> "IpdBatch":
        idx = np.asarray(index)
        if idx.size == 0:
            idx = idx.astype(np.intp)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return IpdBatch(*(pick(getattr(self, f)) for f in _BATCH_ARRAYS), self.discount)

    @staticmethod
    def concat(batches) -> "IpdBatch":
        batches = list(batches)
        if not batches:
            raise ValueError("nothing to concatenate")
        arrays = []
        for f in _BATCH_ARRAYS:
            parts = [getattr(b, f) for b in batches]
            arrays.append(None if any(p is None for p in parts) else np.concatenate(parts))
        return IpdBatch(*arrays, batches[0].discount)


_BATCH_ARRAYS = ("states_1", "states_2", "actions_1", "actions_2", "rewards_1", "rewards_2",
                 "log_probs_1", "log_probs_2")


def _log_prob(logits, states, actions):
    x = logits[states]
    # log sigmoid(x) for cooperation, log sigmoid(-x) for defection
    return -np.logaddexp(0.0, np.where(actions == 1, -x, x))


def rollout(game: IpdGame, policy_1, policy_2, n: int, seed) -> IpdBatch:
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    l1, l2 = _logits(policy_1), _logits(policy_2)
    p1, p2 = _sigmoid(l1), _sigmoid(l2)
    T = game.rollout_length
    S1 = np.empty((n, T), dtype=np.int64)
    S2 = np.empty((n, T), dtype=np.int64)
    A1 = np.empty((n, T), dtype=np.int64)
    A2 = np.empty((n, T), dtype=np.int64)
    s1 = np.full(n, INITIAL_STATE)
    s2 = np.full(n, INITIAL_STATE)
    u = rng.random((T, 2, n))
    for t in range(T):
        S1[:, t], S2[:, t] = s1, s2
        a1 = (u[t, 0] < p1[s1]).astype(np.int64)
        a2 = (u[t, 1] < p2[s2]).astype(np.int64)
        A1[:, t], A2[:, t] = a1, a2
        s1, s2 = 2 * a1 + a2, 2 * a2 + a1
    return IpdBatch(S1, S2, A1, A2, game.payoff_1[A1, A2], game.payoff_2[A2, A1],
                    _log_prob(l1, S1, A1), _log_prob(l2, S2, A2), game.discount)


class ReplayBuffer:
    """FIFO store of joint rollouts with their behavior log-probabilities."""

    def __init__(self, capacity: int = 1024):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._data: Optional[IpdBatch] = None

    def __len__(self):
        return 0 if self._data is None else len(self._data)

    def push(self, batch: IpdBatch):
        if batch.log_probs_1 is None or batch.log_probs_2 is None:
            raise ValueError("buffered rollouts need behavior log-probabilities")
        data = batch if self._data is None else IpdBatch.concat([self._data, batch])
        if len(data) > self.capacity:
            data = data.subset(np.arange(len(data) - self.capacity, len(data)))
        self._data = data

    def contents(self) -> IpdBatch:
        if self._data is None:
            raise ValueError("buffer is empty")
        return self._data

    def sample(self, n: int, rng) -> IpdBatch:
        data = self.contents()
        if n >= len(data):
            return data
        return data.subset(np.sort(rng.choice(len(data), size=n, replace=False)))


# ---------------------------------------------------------------------------
# DiCE estimates


@dataclass(frozen=True, eq=False)
class DiceGrads:
    """Batch-mean DiCE derivatives of both agents' objectives.

    ``cross_2`` is the mixed derivative of J2 laid out [agent-1, agent-2]
    logits and ``cross_1`` that of J1 laid out [agent-2, agent-1], i.e. each
    is the sensitivity of one agent's gradient to the other's parameters.
    Iterating yields ``(grad_1, grad_2, cross_2)``.
    """

    grad_1: np.ndarray          # d J1 / d phi
    grad_2: np.ndarray          # d J2 / d theta
    cross_2: np.ndarray         # d^2 J2 / d phi d theta
    other_1: np.ndarray         # d J1 / d theta
    other_2: np.ndarray         # d J2 / d phi
    cross_1: np.ndarray         # d^2 J1 / d theta d phi

    def __iter__(self):
        return iter((self.grad_1, self.grad_2, self.cross_2))


def _score_scalars(logits, states, actions):
    """The score of a logistic policy is (a - p) on the visited state's logit."""
    return actions - _sigmoid(logits)[states]


def _cumulative_scores(states, z):
    dense = np.zeros(states.shape + (N_LOGITS,))
    np.put_along_axis(dense, states[..., None], z[..., None], axis=-1)
    return np.cumsum(dense, axis=1).reshape(-1, N_LOGITS)


def _agent_terms(rewards, base, st_own, st_oth, z_own, z_oth, cum, w, disc, cross):
    """Gradients of one agent's surrogate and, if ``cross``, its [other, own]
    mixed derivative.  ``cum`` is a pair of flattened cumulative scores
    (own, other) and is only used for the mixed derivative."""
    n = rewards.shape[0]
    wr = w * disc * rewards
    wb = w * disc * base
    adv = np.cumsum(wr[:, ::-1], axis=1)[:, ::-1] - wb
    own = np.bincount(st_own.ravel(), (adv * z_own).ravel(), N_LOGITS) / n
    oth = np.bincount(st_oth.ravel(), (adv * z_oth).ravel(), N_LOGITS) / n
    if not cross:
        return own, oth, None
    c_own, c_oth = cum
    pairs = (st_oth * N_LOGITS + st_own).ravel()
    base_term = np.bincount(pairs, (wb * z_oth * z_own).ravel(), N_LOGITS ** 2)
    mixed = (c_oth * wr.reshape(-1, 1)).T @ c_own - base_term.reshape(N_LOGITS, N_LOGITS)
    return own, oth, mixed / n


def _weighted_grads(batch: IpdBatch, l1, l2, baselines, weights, agents=(1, 2),
                    cross=True) -> DiceGrads:
    """DiCE derivatives for the requested agents; fields not asked for are None."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    b1, b2 = (np.zeros(N_LOGITS), np.zeros(N_LOGITS)) if baselines is None else baselines
    b1, b2 = np.asarray(b1, dtype=np.float64), np.asarray(b2, dtype=np.float64)
    disc = batch.discount ** np.arange(batch.horizon)
    S1, S2 = batch.states_1, batch.states_2
    z1 = _score_scalars(l1, S1, batch.actions_1)
    z2 = _score_scalars(l2, S2, batch.actions_2)
    cu1 = cu2 = None
    if cross:
        cu1, cu2 = _cumulative_scores(S1, z1), _cumulative_scores(S2, z2)
    g1 = o1 = x1 = g2 = o2 = x2 = None
    if 1 in agents:
        g1, o1, x1 = _agent_terms(batch.rewards_1, b1[S1], S1, S2, z1, z2, (cu1, cu2),
                                  weights, disc, cross)
    if 2 in agents:
        g2, o2, x2 = _agent_terms(batch.rewards_2, b2[S2], S2, S1, z2, z1, (cu2, cu1),
                                  weights, disc, cross)
    return DiceGrads(g1, g2, x2, o1, o2, x1)


def dice_grads(batch: IpdBatch, policy_1, policy_2, value_baselines=None) -> DiceGrads:
    """On-policy causal DiCE derivatives with per-state baselines.

    ``value_baselines`` is a pair of 5-vectors (one per agent, indexed by
    that agent's own-perspective state) or None for no baseline.
    """
    w = np.ones(batch.states_1.shape)
    return _weighted_grads(batch, _logits(policy_1), _logits(policy_2), value_baselines, w)


def importance_weights(batch: IpdBatch, policy_1, policy_2, clip: Optional[float] = None,
                       normalize: bool = False):
    """Cumulative joint ratios prod_{t'<=t} pi1 pi2 / (mu1 mu2), optionally clipped.

    ``normalize`` divides each time step's weights by their batch mean
    (self-normalized importance sampling).
    """
    if batch.log_probs_1 is None or batch.log_probs_2 is None:
        raise ValueError("off-policy estimation needs behavior log-probabilities")
    l1, l2 = _logits(policy_1), _logits(policy_2)
    log_ratio = (_log_prob(l1, batch.states_1, batch.actions_1) - batch.log_probs_1
                 + _log_prob(l2, batch.states_2, batch.actions_2) - batch.log_probs_2)
    w = np.exp(np.cumsum(log_ratio, axis=1))
    if clip is not None:
        w = np.minimum(w, clip)
    if normalize:
        w = w / w.mean(axis=0, keepdims=True)
    return w


def off_policy_dice_grads(batch: IpdBatch, policy_1, policy_2, value_baselines=None,
                          clip: Optional[float] = None, normalize: bool = False) -> DiceGrads:
    """DiCE derivatives with each time step reweighted by the cumulative joint ratio."""
    w = importance_weights(batch, policy_1, policy_2, clip, normalize)
    return _weighted_grads(batch, _logits(policy_1), _logits(policy_2), value_baselines, w)


def _inner_terms(batch, own, other, base, off, clip=None, normalize=False):
    """Opponent gradient and mixed derivative only, from the given seat."""
    w = importance_weights(batch, own, other, clip, normalize) if off \
        else np.ones(batch.states_1.shape)
    d = _weighted_grads(batch, own, other, base, w, agents=(2,))
    return d.grad_2, d.cross_2


# ---------------------------------------------------------------------------
# training


class Path(str, enum.Enum):
    EXACT = "exact"
    ON = "on"
    OFF = "off"


@dataclass(frozen=True)
class LolaPaths:
    """Source of the opponent gradient (inner), of the mixed derivative
    (cross) and of the agent's own gradients after the lookahead (outer)."""

    inner: Path = Path.ON
    cross: Path = Path.ON
    outer: Path = Path.ON

    def __post_init__(self):
        for name in ("inner", "cross", "outer"):
            object.__setattr__(self, name, Path(getattr(self, name)))
        if self.outer is Path.OFF:
            raise ValueError("the outer gradient is always on-policy or exact")

    @classmethod
    def from_mode(cls, mode: str) -> "LolaPaths":
        modes = {
            "exact": cls("exact", "exact", "exact"),
            "dice_on_policy": cls("on", "on", "on"),
            "dice_off_policy": cls("off", "off", "on"),
        }
        if mode not in modes:
            raise ValueError(f"unknown mode {mode!r}; expected one of {sorted(modes)}")
        return modes[mode]

    @property
    def code(self) -> str:
        return f"{self.inner.value}-{self.cross.value}-{self.outer.value}"


@dataclass(frozen=True)
class LolaConfig:
    outer_lr: float = 0.1
    inner_lr: float = 0.3
    discount: float = 0.96
    rollout_length: int = 100
    n_updates: int = 500
    value_lr: float = 0.1
    buffer_capacity: int = 1024
    buffer_sample: int = 128
    inner_batch: int = 128
    outer_batch: int = 128
    optimizer: str = "sgd"
    clip: Optional[float] = 1.0
    normalize_weights: bool = False

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        for name in ("rollout_length", "buffer_capacity", "buffer_sample", "inner_batch",
                     "outer_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_updates < 0 or self.outer_lr < 0 or self.inner_lr < 0 or self.value_lr < 0:
            raise ValueError("update counts and learning rates must be non-negative")

    @property
    def game(self) -> IpdGame:
        return IpdGame(discount=self.discount, rollout_length=self.rollout_length)


@dataclass
class _Adam:
    m: np.ndarray = field(default_factory=lambda: np.zeros(N_LOGITS))
    v: np.ndarray = field(default_factory=lambda: np.zeros(N_LOGITS))
    t: int = 0

    def step(self, direction, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * direction
        self.v = b2 * self.v + (1 - b2) * direction ** 2
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        return lr * m_hat / (np.sqrt(v_hat) + eps)


class _Sgd:
    def step(self, direction, lr):
        return lr * direction


def _optimizer(name):
    return _Adam() if name == "adam" else _Sgd()


@dataclass
class LolaState:
    """Mutable training state.  Optimizers hold ascent state for the logits
    (``opt``) and for the value baselines (``vopt``) of each agent."""

    logits_1: np.ndarray
    logits_2: np.ndarray
    baselines_1: np.ndarray
    baselines_2: np.ndarray
    buffer: ReplayBuffer
    rng: np.random.Generator
    opt: list
    vopt: list
    n_updates: int = 0

    @classmethod
    def initial(cls, config: LolaConfig, seed, logits_1=None, logits_2=None) -> "LolaState":
        l1 = np.zeros(N_LOGITS) if logits_1 is None else np.array(logits_1, dtype=np.float64)
        l2 = np.zeros(N_LOGITS) if logits_2 is None else np.array(logits_2, dtype=np.float64)
        return cls(l1, l2, np.zeros(N_LOGITS), np.zeros(N_LOGITS),
                   ReplayBuffer(config.buffer_capacity), np.random.default_rng(seed),
                   [_optimizer(config.optimizer) for _ in range(2)],
                   [_optimizer(config.optimizer) for _ in range(2)])


def _exact_all(game, own, other):
    """Unnormalized exact derivatives from one agent's perspective."""
    _, G, H = _discounted_derivatives(game, own, other)
    return G, H


def value_loss_direction(b, states, rewards, discount):
    """Negative gradient of the mean squared error between per-state
    baselines and the (relative-discount) returns-to-go of a batch."""
    T = rewards.shape[1]
    g = discount ** np.arange(T)
    target = np.cumsum((rewards * g)[:, ::-1], axis=1)[:, ::-1] / g
    err = target - b[states]
    return 2.0 * np.bincount(states.ravel(), weights=err.ravel(), minlength=N_LOGITS) / err.size


def lola_step(state: LolaState, mode: Optional[str] = None, paths: Optional[LolaPaths] = None,
              config: LolaConfig = LolaConfig()) -> LolaState:
    """One simultaneous LOLA update of both agents; mutates and returns ``state``.

    Each agent looks one opponent step ahead, theta' = theta + a_in g2, and
    ascends its own objective at (phi, theta') including the term through
    d theta' / d phi = a_in * d^2 J2 / d phi d theta.
    """
    if paths is None:
        paths = LolaPaths.from_mode(mode or "dice_on_policy")
    game = config.game
    rng = state.rng
    l1, l2 = state.logits_1, state.logits_2
    bl = (state.baselines_1, state.baselines_2)
    bl_swapped = (state.baselines_2, state.baselines_1)
    needs = {paths.inner, paths.cross}

    # inner estimates, one per agent, each computed from that agent's seat
    inner, fit_batches = [], [None, None]
    for seat, (own, other, base) in enumerate(((l1, l2, bl), (l2, l1, bl_swapped))):
        est = {}
        if Path.EXACT in needs:
            G, H = _exact_all(game, own, other)
            est[Path.EXACT] = (G[1, 5:], H[1, :5, 5:])
        if Path.ON in needs or Path.OFF in needs:
            fresh = rollout(game, own, other, config.inner_batch, rng)
            fit_batches[seat] = fresh
            if Path.ON in needs:
                est[Path.ON] = _inner_terms(fresh, own, other, base, False)
            if Path.OFF in needs:
                # fresh rollouts plus a replayed sample of earlier ones; the
                # buffer stores rollouts from agent 1's seat
                batch = fresh
                if len(state.buffer):
                    old = state.buffer.sample(config.buffer_sample, rng)
                    batch = IpdBatch.concat([fresh, _mirror(old) if seat else old])
                est[Path.OFF] = _inner_terms(batch, own, other, base, True, config.clip,
                                             config.normalize_weights)
                state.buffer.push(_mirror(fresh) if seat else fresh)
        inner.append((est[paths.inner][0], est[paths.cross][1]))

    # outer gradients at the looked-ahead opponent
    metas = []
    for seat, ((g_opp, cross), own, other, base) in enumerate(
            ((inner[0], l1, l2, bl), (inner[1], l2, l1, bl_swapped))):
        ahead = other + config.inner_lr * g_opp
        if paths.outer is Path.EXACT:
            G, _ = _exact_all(game, own, ahead)
            g_own, g_ahead = G[0, :5], G[0, 5:]
        else:
            batch = rollout(game, own, ahead, config.outer_batch, rng)
            d = _weighted_grads(batch, own, ahead, base, np.ones(batch.states_1.shape),
                                agents=(1,), cross=False)
            g_own, g_ahead = d.grad_1, d.other_1
            fit_batches[seat] = batch
        metas.append(g_own + config.inner_lr * cross @ g_ahead)

    state.logits_1 = l1 + state.opt[0].step(metas[0], config.outer_lr)
    state.logits_2 = l2 + state.opt[1].step(metas[1], config.outer_lr)

    for seat, batch in enumerate(fit_batches):
        if batch is None:
            continue
        b = state.baselines_2 if seat else state.baselines_1
        step = state.vopt[seat].step(
            value_loss_direction(b, batch.states_1, batch.rewards_1, game.discount), config.value_lr)
        if seat:
            state.baselines_2 = b + step
        else:
            state.baselines_1 = b + step
    state.n_updates += 1
    return state


def _mirror(batch: IpdBatch) -> IpdBatch:
    """The same rollouts seen from the other agent's seat."""
    return IpdBatch(batch.states_2, batch.states_1, batch.actions_2, batch.actions_1,
                    batch.rewards_2, batch.rewards_1, batch.log_probs_2, batch.log_probs_1,
                    batch.discount)


@dataclass(frozen=True, eq=False)
class LolaRun:
    """Per-update mean per-step return (average of both agents), one row per seed."""

    returns: np.ndarray         # [n_seeds, n_updates + 1]
    seeds: tuple

    @property
    def final_returns(self) -> np.ndarray:
        """Mean over the last ten evaluations of each seed."""
        return self.returns[:, -10:].mean(axis=1)

    @property
    def final_mean(self) -> float:
        return float(self.final_returns.mean())


def _evaluate(game, state) -> float:
    return float(expected_step_return(game, state.logits_1, state.logits_2).mean())


def run_lola_experiment(config: LolaConfig = LolaConfig(), n_seeds: int = 10, mode: Optional[str] = None,
                        paths: Optional[LolaPaths] = None, seed: int = 0, seeds=None) -> LolaRun:
    """Train from uniform policies for each seed and record exact expected returns."""
    if n_seeds < 1:
        raise ValueError("n_seeds must be at least 1")
    if paths is None:
        paths = LolaPaths.from_mode(mode or "dice_on_policy")
    seeds = tuple(range(seed, seed + n_seeds)) if seeds is None else tuple(seeds)
    game = config.game
    curves = []
    for s in seeds:
        state = LolaState.initial(config, np.random.SeedSequence([int(s), 1729]))
        curve = [_evaluate(game, state)]
        for _ in range(config.n_updates):
            lola_step(state, paths=paths, config=config)
            curve.append(_evaluate(game, state))
        curves.append(curve)
    return LolaRun(np.array(curves), seeds)

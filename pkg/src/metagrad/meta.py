"""K-step inner-loop meta-gradients: exact, estimated, and their measured bias.

The meta-gradient is accumulated forward.  With D = d theta^i / d phi stored as
``[d_phi, d_theta]``::

    D^{i+1} = D^i (I + alpha H^i) + alpha J^i
    grad_phi = D^K grad_theta V(theta^K)

where H^i is the inner-objective Hessian at theta^i and J^i the mixed
phi/theta derivative.  MAML starts from D^0 = I with J = 0; LIRPG (intrinsic
reward phi added to the inner reward only) starts from D^0 = 0.

For estimated meta-gradients, three independent estimator slots drive the
iterates (I), the curvature accumulation (II) and the outer gradient (III),
each either exact or stochastic with its own fresh batches.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .estimators import (
    EstimatorKind,
    Kind,
    estimate_hessian,
    estimate_policy_gradient,
    estimate_reward_jacobian,
)
from .mdp import (
    TabularMdp,
    exact_policy_gradient,
    exact_policy_hessian,
    exact_reward_jacobian,
    generate_random_mdp,
    noisy_value_table,
    sample_trajectories,
)

__all__ = [
    "Variant",
    "MetaProblem",
    "InnerLoopConfig",
    "EstimatorAssignment",
    "MdpSpec",
    "MetaGradReport",
    "MeasureReport",
    "exact_inner_loop",
    "exact_meta_gradient",
    "estimate_meta_gradient",
    "hessian_perturbation",
    "correlation",
    "measure",
    "measure_compositional_bias",
]


class Variant(str, enum.Enum):
    MAML = "maml"
    LIRPG = "lirpg"


@dataclass(frozen=True, eq=False)
class MetaProblem:
    variant: Variant
    mdp: TabularMdp
    meta_params: np.ndarray
    theta0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        shape = (self.mdp.n_states, self.mdp.n_actions)
        if np.shape(self.meta_params) != shape or np.shape(self.theta0) != shape:
            raise ValueError(f"meta_params and theta0 must have shape {shape}")
        if self.variant is Variant.MAML and self.meta_params is not self.theta0:
            raise ValueError("for MAML the meta-parameters are the initial policy parameters")

    @classmethod
    def maml(cls, mdp: TabularMdp, theta0=None) -> "MetaProblem":
        if theta0 is None:
            theta0 = np.zeros((mdp.n_states, mdp.n_actions))
        theta0 = np.asarray(theta0, dtype=np.float64)
        return cls(Variant.MAML, mdp, theta0, theta0)

    @classmethod
    def lirpg(cls, mdp: TabularMdp, phi=None, theta0=None) -> "MetaProblem":
        shape = (mdp.n_states, mdp.n_actions)
        phi = np.zeros(shape) if phi is None else np.asarray(phi, dtype=np.float64)
        theta0 = np.zeros(shape) if theta0 is None else np.asarray(theta0, dtype=np.float64)
        return cls(Variant.LIRPG, mdp, phi, theta0)

    @property
    def inner_reward(self) -> np.ndarray:
        if self.variant is Variant.LIRPG:
            return self.mdp.reward + self.meta_params
        return self.mdp.reward

    def with_meta_params(self, meta_params) -> "MetaProblem":
        meta_params = np.asarray(meta_params, dtype=np.float64)
        if self.variant is Variant.MAML:
            return MetaProblem.maml(self.mdp, meta_params)
        return MetaProblem.lirpg(self.mdp, meta_params, self.theta0)


@dataclass(frozen=True)
class InnerLoopConfig:
    k_steps: int = 1
    learning_rate: float = 10.0
    injection_coefficient: float = 0.0
    perturbation_seed: int = 0
    noise_coefficient: float = 1.0

    def __post_init__(self):
        if self.k_steps < 0:
            raise ValueError("k_steps must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")


@dataclass(frozen=True)
class EstimatorAssignment:
    """Estimators for the iterate path (I), curvature path (II) and outer gradient (III)."""

    compositional: EstimatorKind
    curvature: EstimatorKind
    outer: EstimatorKind

    @property
    def code(self) -> str:
        return "".join("E" if k.is_exact else "S"
                       for k in (self.compositional, self.curvature, self.outer))

    @classmethod
    def from_code(cls, code: str, kind="lvc", batch_size: int = 10) -> "EstimatorAssignment":
        code = code.upper()
        if len(code) != 3 or set(code) - {"S", "E"}:
            raise ValueError(f"assignment code must be three of S/E, got {code!r}")
        stochastic = EstimatorKind(kind, batch_size)
        return cls(*(stochastic if c == "S" else EstimatorKind.exact() for c in code))

    @classmethod
    def exact(cls) -> "EstimatorAssignment":
        e = EstimatorKind.exact()
        return cls(e, e, e)


ALL_CODES = ("SSS", "SSE", "SES", "ESS", "SEE", "ESE", "EES")


@functools.lru_cache(maxsize=64)
def _perturbation(seed: int, d: int) -> np.ndarray:
    G = np.random.default_rng(seed).standard_normal((d, d))
    sym = G + G.T
    out = sym / np.max(np.abs(np.linalg.eigvalsh(sym)))
    out.setflags(write=False)
    return out


def hessian_perturbation(seed: int, d: int) -> np.ndarray:
    """Fixed symmetric Gaussian matrix with unit spectral norm."""
    return _perturbation(int(seed), int(d))


def _path_rngs(master_seed):
    ss = master_seed if isinstance(master_seed, np.random.SeedSequence) \
        else np.random.SeedSequence(master_seed)
    return [np.random.default_rng(s) for s in ss.spawn(3)]


def exact_inner_loop(problem: MetaProblem, config: InnerLoopConfig) -> list:
    theta = np.asarray(problem.theta0, dtype=np.float64)
    iterates = [theta]
    R_in = problem.inner_reward
    for _ in range(config.k_steps):
        g = exact_policy_gradient(problem.mdp, theta, R_in).reshape(theta.shape)
        theta = theta + config.learning_rate * g
        iterates.append(theta)
    return iterates


def _slot_gradient(slot, mdp, theta, reward, rng, noise, sample):
    if slot.is_exact:
        return exact_policy_gradient(mdp, theta, reward)
    batch = sample(mdp, theta, slot.batch_size, rng)
    baseline = None
    if slot.kind is not Kind.DICE:
        baseline = noisy_value_table(mdp, theta, noise, rng, reward)
    return estimate_policy_gradient(slot.kind, batch, theta, baseline, reward).value


def _slot_hessian(slot, mdp, theta, reward, rng, noise, sample):
    if slot.is_exact:
        return exact_policy_hessian(mdp, theta, reward)
    batch = sample(mdp, theta, slot.batch_size, rng)
    baseline = None
    if slot.kind is not Kind.DICE:
        baseline = noisy_value_table(mdp, theta, noise, rng, reward)
    return estimate_hessian(slot.kind, batch, theta, baseline, reward).value


def _slot_jacobian(slot, mdp, theta, reward, rng, sample):
    if slot.is_exact:
        return exact_reward_jacobian(mdp, theta, reward)
    batch = sample(mdp, theta, slot.batch_size, rng)
    return estimate_reward_jacobian(slot.kind, batch, theta).value


def estimate_meta_gradient(problem: MetaProblem, config: InnerLoopConfig,
                           assignment: EstimatorAssignment, master_seed=0,
                           sample: Callable = sample_trajectories,
                           return_iterate: bool = False):
    """One meta-gradient sample; exact wherever the assignment says so.

    Each inner step draws fresh batches: one for the iterate update (slot I),
    one for the Hessian and, for LIRPG, one for the reward Jacobian (slot II).
    The outer gradient at the final iterate uses slot III.  The three slots
    draw from independent streams spawned from ``master_seed``.  ``sample``
    can be swapped for a deterministic batch provider in tests.
    """
    mdp = problem.mdp
    alpha = config.learning_rate
    noise = config.noise_coefficient
    rng_i, rng_ii, rng_iii = _path_rngs(master_seed)
    R_in = problem.inner_reward
    d = mdp.n_params
    eye = np.eye(d)
    lirpg = problem.variant is Variant.LIRPG
    delta = None
    if config.injection_coefficient != 0.0:
        delta = config.injection_coefficient * hessian_perturbation(config.perturbation_seed, d)

    theta = np.asarray(problem.theta0, dtype=np.float64)
    D = np.zeros((d, d)) if lirpg else eye.copy()
    for i in range(config.k_steps):
        # D^0 = 0 for LIRPG: the first Hessian never enters
        if not (lirpg and i == 0):
            Hh = _slot_hessian(assignment.curvature, mdp, theta, R_in, rng_ii, noise, sample)
            if delta is not None:
                Hh = Hh + delta
            D = D @ (eye + alpha * Hh)
        if lirpg:
            D = D + alpha * _slot_jacobian(assignment.curvature, mdp, theta, R_in, rng_ii, sample)
        g = _slot_gradient(assignment.compositional, mdp, theta, R_in, rng_i, noise, sample)
        theta = theta + alpha * g.reshape(theta.shape)

    g_out = _slot_gradient(assignment.outer, mdp, theta, mdp.reward, rng_iii, noise, sample)
    meta = D @ g_out
    return (meta, theta) if return_iterate else meta


def exact_meta_gradient(problem: MetaProblem, config: InnerLoopConfig) -> np.ndarray:
    """Exact meta-gradient; injection settings in ``config`` are ignored."""
    clean = InnerLoopConfig(config.k_steps, config.learning_rate, 0.0, config.perturbation_seed,
                            config.noise_coefficient)
    return estimate_meta_gradient(problem, clean, EstimatorAssignment.exact())


def correlation(x, y) -> float:
    """Cosine similarity x.y / (|x| |y|)."""
    x = np.ravel(np.asarray(x, dtype=np.float64))
    y = np.ravel(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    xx, yy = float(x @ x), float(y @ y)
    if xx == 0.0 or yy == 0.0:
        raise ValueError("correlation is undefined for a zero vector")
    return float(np.clip((x @ y) / np.sqrt(xx * yy), -1.0, 1.0))


@dataclass(frozen=True)
class MdpSpec:
    n_states: int = 20
    n_actions: int = 5
    density: float = 0.001
    horizon: int = 20
    discount: float = 0.8

    def generate(self, seed) -> TabularMdp:
        return generate_random_mdp(seed, self.n_states, self.n_actions, self.density,
                                   self.horizon, self.discount)


@dataclass(frozen=True, eq=False)
class MetaGradReport:
    exact_grad: np.ndarray
    estimates: np.ndarray  # [n_trials, d]
    mean_estimate: np.ndarray
    bias_norm: float
    variance: float
    mean_correlation: float

    @property
    def n_trials(self) -> int:
        return self.estimates.shape[0]

    @classmethod
    def from_estimates(cls, exact_grad, estimates) -> "MetaGradReport":
        estimates = np.asarray(estimates, dtype=np.float64)
        mean = estimates.mean(axis=0)
        bias = float(np.linalg.norm(mean - exact_grad))
        var = float(np.mean(np.sum((estimates - mean) ** 2, axis=1)))
        corr = []
        for e in estimates:
            try:
                corr.append(correlation(e, exact_grad))
            except ValueError:
                corr.append(0.0)
        return cls(exact_grad, estimates, mean, bias, var, float(np.mean(corr)))


@dataclass(frozen=True, eq=False)
class MeasureReport:
    per_mdp: list
    mdp_seeds: list

    @property
    def bias_norm(self) -> float:
        return float(np.mean([r.bias_norm for r in self.per_mdp]))

    @property
    def variance(self) -> float:
        return float(np.mean([r.variance for r in self.per_mdp]))

    @property
    def mean_correlation(self) -> float:
        return float(np.mean([r.mean_correlation for r in self.per_mdp]))

    @property
    def n_trials(self) -> int:
        return self.per_mdp[0].n_trials if self.per_mdp else 0


def mdp_seed(seed: int, index: int) -> list:
    return [int(seed), int(index)]


def trial_seed(seed: int, index: int, trial: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index), int(trial), 7])


def measure(variant, config: InnerLoopConfig, assignment: EstimatorAssignment,
            n_independent_mdps: int = 10, n_repeat_trials: int = 20, seed: int = 0,
            mdp_spec: Optional[MdpSpec] = None, mdp_indices=None) -> MeasureReport:
    """Bias, variance and mean correlation of estimated vs exact meta-gradients.

    MDP ``j`` is generated from ``[seed, j]`` and trial ``k`` on it uses
    ``trial_seed(seed, j, k)``, so every assignment sees the same MDPs and the
    same per-trial streams.  ``mdp_indices`` restricts the run to a subset.
    """
    if n_repeat_trials < 1:
        raise ValueError("n_repeat_trials must be at least 1")
    spec = mdp_spec or MdpSpec()
    variant = Variant(variant)
    indices = range(n_independent_mdps) if mdp_indices is None else mdp_indices
    reports, seeds = [], []
    for j in indices:
        mdp = spec.generate(mdp_seed(seed, j))
        problem = MetaProblem.maml(mdp) if variant is Variant.MAML else MetaProblem.lirpg(mdp)
        exact = exact_meta_gradient(problem, config)
        est = [estimate_meta_gradient(problem, config, assignment, trial_seed(seed, j, k))
               for k in range(n_repeat_trials)]
        reports.append(MetaGradReport.from_estimates(exact, est))
        seeds.append(mdp_seed(seed, j))
    return MeasureReport(reports, seeds)


def measure_compositional_bias(problem: MetaProblem, config: InnerLoopConfig, batch_size=None,
                               n_trials: int = 20, seed: int = 0, kind="lvc") -> float:
    """Monte-Carlo estimate of E|theta_hat^K - theta^K| for stochastic inner updates.

    ``batch_size=None`` (or ``kind='exact'``) means exact inner updates, which
    gives exactly zero.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    target = exact_inner_loop(problem, config)[-1]
    if batch_size is None or Kind(kind) is Kind.EXACT or config.k_steps == 0:
        return 0.0
    slot = EstimatorKind(kind, batch_size)
    assignment = EstimatorAssignment(slot, EstimatorKind.exact(), EstimatorKind.exact())
    dists = []
    for k in range(n_trials):
        ss = np.random.SeedSequence([int(seed), int(k), 11])
        rng_i = _path_rngs(ss)[0]
        theta = np.asarray(problem.theta0, dtype=np.float64)
        for _ in range(config.k_steps):
            g = _slot_gradient(assignment.compositional, problem.mdp, theta, problem.inner_reward,
                               rng_i, config.noise_coefficient, sample_trajectories)
            theta = theta + config.learning_rate * g.reshape(theta.shape)
        dists.append(np.linalg.norm(theta - target))
    return float(np.mean(dists))

"""Exact and estimated meta-gradients for tabular meta-RL and LOLA on the iterated prisoner's dilemma."""

from .estimators import (
    EstimatorKind,
    Kind,
    estimate_hessian,
    estimate_policy_gradient,
    estimate_reward_jacobian,
    importance_weighted_gradient,
)
from .lola import (
    IpdGame,
    LolaConfig,
    LolaPaths,
    Memory1Policy,
    ReplayBuffer,
    dice_grads,
    exact_joint_value,
    exact_value_gradients,
    lola_step,
    off_policy_dice_grads,
    rollout,
    run_lola_experiment,
)
from .mdp import (
    TabularMdp,
    TrajectoryBatch,
    exact_policy_gradient,
    exact_policy_hessian,
    exact_reward_jacobian,
    exact_value,
    generate_random_mdp,
    noisy_value_table,
    policy_probs,
    sample_trajectories,
)
from .meta import (
    EstimatorAssignment,
    InnerLoopConfig,
    MetaProblem,
    correlation,
    estimate_meta_gradient,
    exact_inner_loop,
    exact_meta_gradient,
    measure,
    measure_compositional_bias,
)
from .oracle import enumerate_trajectories, expected_estimate

__version__ = "0.1.0"

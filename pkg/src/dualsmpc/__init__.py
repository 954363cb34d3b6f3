"""Shielding-aware implicit dual stochastic MPC for interaction planning.

The package couples an ego agent with one or more other agents whose intent
parameters are hidden. Plans are computed over a dynamic scenario tree that
propagates Gaussian/categorical beliefs in-loop (which is what makes the ego
probe informatively), while a supervisory safety filter with a fallback
policy keeps the closed loop collision-free.

Subpackage map:
    dynamics   -- agent models, joint input-affine dynamics, linearization
    behavior   -- basis Q-values, Laplace approximation, mean matrices
    models     -- the named behavior models (highway, intersection, ...)
    belief     -- Gaussian/categorical belief states and Bayes updates
    tree       -- scenario-tree construction and sample transforms
    shielding  -- fallback policy, safety filter, RCBF constraint data
    solver     -- projected quasi-Newton trust-region optimizer
    planner    -- tree program assembly, initialization pipeline, variants
    sim        -- closed-loop harness, simulated opponents, metrics
    cli        -- experiment runner (run / compare / replay / selftest)
"""

import os as _os

from jax import config as _jax_config

# Double precision everywhere; the belief engine and the acceptance
# tolerances are meaningless in float32.
_jax_config.update("jax_enable_x64", True)

# Reuse compiled tree rollouts across processes (test runs, CLI batches).
_cache_dir = _os.environ.get(
    "DUALSMPC_JAX_CACHE", _os.path.join(_os.path.expanduser("~"), ".cache", "dualsmpc-jax")
)
if _cache_dir:
    try:
        _os.makedirs(_cache_dir, exist_ok=True)
        _jax_config.update("jax_compilation_cache_dir", _cache_dir)
        _jax_config.update("jax_persistent_cache_min_compile_time_secs", 1.0)
    except Exception:  # pragma: no cover - cache is best-effort
        pass

from . import errors
from .dynamics import (
    AgentModel,
    FailureSet,
    JointSystem,
    linearize,
    step_joint,
    to_parameter_affine,
)
from .behavior import (
    BehaviorModel,
    PolicyGaussian,
    QValueFunction,
    basis_mean,
    combined_covariance,
    laplace_approx,
    mean_matrix,
    policy_distribution,
)
from .belief import (
    BeliefState,
    TransitionModel,
    measurement_update_mode,
    measurement_update_theta,
    mode_likelihood,
    transition_update,
    update,
)
from .tree import ScenarioNode, ScenarioTree, build_tree, path_probability, transform_samples
from .shielding import (
    HalfspaceSafeSet,
    ShieldingMechanism,
    fallback_policy,
    identify_shielding_nodes,
    in_shielding_set,
    local_halfspace,
    rcbf_value,
    safety_filter,
    worst_case_disturbance,
)
from .planner import (
    PlannerConfig,
    PlannerVariant,
    TreeProgram,
    TreeSolution,
    assemble,
    initialize,
    plan,
    solve,
    tree_objective,
)
from .sim import (
    EpisodeLog,
    ScenarioConfig,
    closed_loop_cost,
    collision_rate,
    efficiency_index,
    ground_truth_opponent,
    replay_opponent,
    run_episode,
    safety_index,
)

__version__ = "0.1.0"

__all__ = [
    "AgentModel",
    "BehaviorModel",
    "BeliefState",
    "EpisodeLog",
    "FailureSet",
    "HalfspaceSafeSet",
    "JointSystem",
    "PlannerConfig",
    "PlannerVariant",
    "PolicyGaussian",
    "QValueFunction",
    "ScenarioConfig",
    "ScenarioNode",
    "ScenarioTree",
    "ShieldingMechanism",
    "TransitionModel",
    "TreeProgram",
    "TreeSolution",
    "assemble",
    "basis_mean",
    "build_tree",
    "closed_loop_cost",
    "collision_rate",
    "combined_covariance",
    "efficiency_index",
    "errors",
    "fallback_policy",
    "ground_truth_opponent",
    "identify_shielding_nodes",
    "in_shielding_set",
    "initialize",
    "laplace_approx",
    "linearize",
    "local_halfspace",
    "mean_matrix",
    "measurement_update_mode",
    "measurement_update_theta",
    "mode_likelihood",
    "path_probability",
    "plan",
    "policy_distribution",
    "rcbf_value",
    "replay_opponent",
    "run_episode",
    "safety_filter",
    "safety_index",
    "solve",
    "step_joint",
    "to_parameter_affine",
    "transform_samples",
    "transition_update",
    "tree_objective",
    "update",
    "worst_case_disturbance",
]

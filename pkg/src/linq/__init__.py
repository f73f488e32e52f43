"""Parametric Q-learning for discounted MDPs with linear transition kernels."""

from .harness import ExperimentSpec, SpecError
from .instances import (
    AnchorsNotFound,
    AnchorSet,
    Embedding,
    find_anchors,
    make_anchor_set,
    make_lower_bound_instance,
    make_random_linear_mdp,
    make_random_tabular_mdp,
    make_soft_aggregation_mdp,
    perturb_kernel,
    regularity_L,
)
from .mdp import (
    BasicParams,
    DiscountedMdp,
    FeatureMap,
    LinearMdp,
    StackedParams,
    basic_values,
    bellman_apply,
    bellman_apply_policy,
    decode_basic,
    decode_stacked,
    greedy_policy,
    load_instance,
    save_instance,
    stacked_values,
)
from .oppq import OPPQLearner, OppqConfig, monotonicity_audit, oppq_learn
from .oracle import (
    ExactSolution,
    bellman_closure_residual,
    check_span,
    evaluate_policy,
    fit_linear_model,
    policy_error,
    solve_optimal,
    total_variance_bound,
    variance_function,
)
from .ppq import PPQLearner, PpqConfig, ppq_learn
from .sampling import CountingModel, GenerativeModel

__version__ = "0.1.0"

__all__ = [
    "AnchorSet", "AnchorsNotFound", "BasicParams", "CountingModel", "DiscountedMdp", "Embedding", "ExactSolution",
    "ExperimentSpec", "FeatureMap", "GenerativeModel", "LinearMdp", "OPPQLearner", "OppqConfig", "PPQLearner",
    "PpqConfig", "SpecError", "StackedParams", "basic_values", "bellman_apply", "bellman_apply_policy",
    "bellman_closure_residual", "check_span", "decode_basic", "decode_stacked", "evaluate_policy", "find_anchors",
    "fit_linear_model", "greedy_policy", "load_instance", "make_anchor_set", "make_lower_bound_instance",
    "make_random_linear_mdp", "make_random_tabular_mdp", "make_soft_aggregation_mdp", "monotonicity_audit",
    "oppq_learn", "perturb_kernel", "policy_error", "ppq_learn", "regularity_L", "save_instance", "solve_optimal",
    "stacked_values", "total_variance_bound", "variance_function",
]

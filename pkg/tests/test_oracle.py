import json

import numpy as np
import pytest

from linq import (
    DiscountedMdp,
    FeatureMap,
    bellman_closure_residual,
    check_span,
    evaluate_policy,
    fit_linear_model,
    make_random_linear_mdp,
    make_random_tabular_mdp,
    make_soft_aggregation_mdp,
    perturb_kernel,
    policy_error,
    solve_optimal,
    total_variance_bound,
    variance_function,
)
from linq.oracle import ConvergenceError, ExactSolution, dumps_solution

from conftest import two_state, two_state_linear

# frozen regression value: check_span residual of the zero policy on
# make_random_linear_mdp(12, 3, 4, 0.9, seed=3) perturbed with xi = 0.3, seed 11
PERTURBED_SPAN_RESIDUAL = 0.03392830679806558


def test_two_state_optimum():
    sol = solve_optimal(two_state(), 1e-9)
    assert np.abs(sol.v_star - [1.0, 2.0]).max() <= 1e-9
    assert sol.pi_star[0] == 1
    assert sol.residual <= 1e-9


def test_zero_and_constant_rewards():
    p = make_random_tabular_mdp(6, 3, 0.8, seed=0).transitions
    sol = solve_optimal(DiscountedMdp(np.zeros((6, 3)), p, 0.8))
    assert np.all(sol.v_star == 0) and np.all(sol.pi_star == 0)
    sol = solve_optimal(DiscountedMdp(np.full((6, 3), 0.3), p, 0.8), 1e-10)
    np.testing.assert_allclose(sol.v_star, 0.3 / 0.2, atol=1e-10)


def test_solver_rejects_bad_tol_and_reports_nonconvergence():
    with pytest.raises(ValueError):
        solve_optimal(two_state(), 0.0)
    with pytest.raises(ConvergenceError, match="residual"):
        solve_optimal(two_state(0.99), 1e-12, max_iter=5)


def test_evaluate_policy_two_state():
    mdp = two_state()
    stay = np.array([0, 0])
    np.testing.assert_allclose(evaluate_policy(mdp, stay), [0.0, 2.0], atol=1e-12)
    np.testing.assert_allclose(evaluate_policy(mdp, stay, method="iterative"), [0.0, 2.0], atol=2e-9)
    with pytest.raises(ValueError):
        evaluate_policy(mdp, stay, method="magic")


def test_evaluate_policy_paths_agree():
    rng = np.random.default_rng(0)
    tol = 1e-9
    for seed in range(100):
        mdp = make_random_tabular_mdp(int(rng.integers(2, 20)), int(rng.integers(1, 5)), 0.9, seed=seed)
        pi = rng.integers(mdp.n_actions, size=mdp.n_states)
        direct = evaluate_policy(mdp, pi, tol)
        it = evaluate_policy(mdp, pi, tol, method="iterative")
        assert np.abs(direct - it).max() <= 2 * tol


def test_policy_error_cases():
    mdp = two_state()
    assert policy_error(mdp, [1, 0]) <= 1e-9
    assert policy_error(mdp, [0, 0]) == pytest.approx(1.0, abs=2e-9)
    rng = np.random.default_rng(1)
    big = make_random_tabular_mdp(10, 4, 0.9, seed=3)
    sol = solve_optimal(big)
    for _ in range(20):
        err = policy_error(big, rng.integers(4, size=10), solution=sol)
        assert 0.0 <= err <= 1 / (1 - 0.9)


def test_variance_function_cases():
    mdp = two_state()
    np.testing.assert_array_equal(variance_function(mdp, [3.0, -1.0]), 0.0)
    fair = DiscountedMdp(np.zeros((2, 1)), np.full((2, 2), 0.5), 0.9)
    np.testing.assert_allclose(variance_function(fair, [0.0, 2.0]), 1.0)
    rand = make_random_tabular_mdp(8, 2, 0.9, seed=0)
    np.testing.assert_allclose(variance_function(rand, np.full(8, 4.2)), 0.0, atol=1e-12)
    v = np.random.default_rng(0).normal(size=8)
    assert np.all(variance_function(rand, v) <= (v * v).max())


def test_check_span_realizable_and_full_span():
    lm, _ = make_random_linear_mdp(25, 3, 4, 0.9, seed=5)
    rng = np.random.default_rng(2)
    for _ in range(5):
        assert check_span(lm.mdp, lm.features, rng.integers(3, size=25)) <= 1e-8
    tab = make_random_tabular_mdp(5, 2, 0.9, seed=1)
    assert check_span(tab, np.eye(10), [0, 1, 0, 1, 1]) <= 1e-12


def test_check_span_perturbed_counterexample_frozen():
    lm, _ = make_random_linear_mdp(12, 3, 4, 0.9, seed=3)
    pert = perturb_kernel(lm, 0.3, seed=11)
    resid = check_span(pert, lm.features, np.zeros(12, dtype=int))
    assert resid > 1e-6
    assert resid == pytest.approx(PERTURBED_SPAN_RESIDUAL, rel=1e-9)


def test_fit_linear_model_cases():
    lm, anchors = make_random_linear_mdp(30, 3, 5, 0.9, seed=2)
    _, xi = fit_linear_model(lm.mdp, lm.features)
    assert xi <= 1e-10
    pert = perturb_kernel(lm, 0.05, seed=1)
    for a in (None, anchors):
        _, xi = fit_linear_model(pert, lm.features, a)
        assert xi <= 0.05 + 1e-10
    tab = make_random_tabular_mdp(4, 2, 0.9, seed=0)
    assert fit_linear_model(tab, np.eye(8))[1] <= 1e-12
    with pytest.raises(ValueError, match="rank"):
        fit_linear_model(tab, np.column_stack([np.ones(8), np.ones(8)]) / 2)


def test_fit_linear_model_soft_aggregation():
    lm, _ = make_soft_aggregation_mdp(20, 2, 4, 0.9, seed=0)
    assert fit_linear_model(lm.mdp, lm.features)[1] <= 1e-10


def test_bellman_closure_realizable():
    rng = np.random.default_rng(3)
    lm, _ = make_random_linear_mdp(20, 3, 4, 0.9, seed=8)
    basis = np.column_stack([lm.rewards.ravel(), lm.features.values])
    for _ in range(10):
        q = basis @ rng.normal(size=5)
        assert bellman_closure_residual(lm.mdp, lm.features, q) <= 1e-8


def non_realizable(seed):
    """Stochastic features with ``r = Phi c`` but an unstructured kernel."""
    rng = np.random.default_rng(seed)
    phi = rng.dirichlet(np.ones(3), size=8 * 2)
    rewards = (phi @ rng.uniform(size=3)).reshape(8, 2)
    p = rng.dirichlet(np.ones(8), size=16)
    return DiscountedMdp(rewards, p, 0.9), FeatureMap(phi)


@pytest.mark.parametrize("seed", range(5))
def test_bellman_closure_non_realizable(seed):
    mdp, feats = non_realizable(seed)
    assert bellman_closure_residual(mdp, feats, mdp.rewards) > 1e-4


def test_total_variance_bound_cases():
    assert total_variance_bound(two_state(), solve_optimal(two_state())) == 0.0
    small = two_state(0.1)
    assert total_variance_bound(small, solve_optimal(small)) <= 2
    lm, _ = make_random_linear_mdp(40, 3, 5, 0.9, seed=0)
    assert 0 < total_variance_bound(lm.mdp, solve_optimal(lm.mdp)) <= 2


def test_solution_json_round_trip():
    sol = solve_optimal(two_state_linear().mdp)
    doc = json.loads(dumps_solution(sol, "abc"))
    assert doc["instance_sha256"] == "abc"
    back = ExactSolution.from_dict(doc)
    np.testing.assert_array_equal(back.v_star, sol.v_star)
    np.testing.assert_array_equal(back.q_star, sol.q_star)
    np.testing.assert_array_equal(back.pi_star, sol.pi_star)


# --- variance lemmas ---------------------------------------------------------


def _sd(p, v):
    return np.sqrt(max(p @ (v * v) - (p @ v) ** 2, 0.0))


def test_variance_triangle_inequality():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        p = rng.dirichlet(np.ones(n) * rng.uniform(0.1, 2))
        v1, v2 = rng.normal(scale=rng.uniform(0.1, 10), size=(2, n))
        slack = _sd(p, v1) + _sd(p, v2) - _sd(p, v1 + v2)
        assert slack >= -1e-10


def test_convex_combination_of_standard_deviations():
    rng = np.random.default_rng(1)
    instances = [make_random_linear_mdp(30, 3, 5, 0.9, seed=s, support_fraction=0.3)[0] for s in range(5)]
    for t in range(1000):
        lm = instances[t % 5]
        v = rng.uniform(0, 10, size=30)
        s, a = int(rng.integers(30)), int(rng.integers(3))
        phi = lm.features.values[s * 3 + a]
        lhs = sum(phi[k] * _sd(lm.psi[k], v) for k in range(5))
        assert _sd(lm.mdp.transition_row(s, a), v) - lhs >= -1e-10

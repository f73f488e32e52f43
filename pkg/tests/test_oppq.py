import math
import types

import numpy as np
import pytest
from sklearn.base import clone

from linq import (
    CountingModel,
    DiscountedMdp,
    GenerativeModel,
    OPPQLearner,
    OppqConfig,
    StackedParams,
    make_anchor_set,
    make_random_linear_mdp,
    monotonicity_audit,
    oppq_learn,
    policy_error,
    solve_optimal,
    stacked_values,
)
from linq.oppq import inner_update, outer_reference
from linq.oracle import variance_function

from conftest import two_state, two_state_linear

# frozen regression value: outer variance estimate on a fair row over values
# {0, 2} with m = 10^4 draws and seed 0 (population variance 1, band [0.9, 1.1])
FAIR_SIGMA_SEED0 = 0.9999960000000001
ENVELOPE_C = 4.0  # 2 * max(C_outer, C_inner) at the defaults
EPS, DELTA, GAMMA = 0.5, 0.1, 0.8


@pytest.fixture(scope="module")
def instance():
    return make_random_linear_mdp(30, 3, 4, GAMMA, seed=0, support_fraction=0.2)


@pytest.fixture(scope="module")
def solution(instance):
    return solve_optimal(instance[0].mdp)


def test_config_schedule():
    anchors = make_anchor_set(np.eye(10), np.arange(10), anchored=True)
    cfg = OppqConfig(0.1, 0.1, 0.9, anchors)
    r_outer = math.ceil(1.5 * math.log(1 / (0.1 * 0.1)) - 1e-9)
    r_inner = math.ceil(1.5 * r_outer * 10 - 1e-9)
    lg = math.log(r_outer * r_inner * 10 / 0.1)
    assert (cfg.n_outer, cfg.n_inner) == (7, 105) == (r_outer, r_inner)
    assert cfg.log_term == pytest.approx(lg, rel=1e-15)
    assert cfg.m == math.ceil(lg ** (4 / 3) * 1000 / 0.01)
    assert cfg.m1 == math.ceil(lg * 100)
    assert cfg.samples_required == 10 * 8 * cfg.m + 10 * 8 * 105 * cfg.m1
    assert cfg.max_stack_size == 1 + 8 * 105
    assert cfg.realized()["C_outer"] == 2.0


@pytest.mark.parametrize("bad", [dict(epsilon=0.0), dict(delta=1.0), dict(discount=1.0), dict(C_outer=0.0),
                                 dict(C_m1=1e6)])
def test_config_rejects_invalid(bad):
    anchors = make_anchor_set(np.eye(2), [0, 1], anchored=True)
    kw = dict(epsilon=0.1, delta=0.1, discount=0.9, anchors=anchors) | bad
    with pytest.raises(ValueError):
        OppqConfig(**kw)


def _single_anchor(row, gamma=0.9):
    """One state-action pair per state, one feature, kernel row ``row`` everywhere."""
    n = len(row)
    mdp = DiscountedMdp(np.zeros((n, 1)), np.tile(row, (n, 1)), gamma)
    return mdp, make_anchor_set(np.ones((n, 1)), [0], anchored=True)


def test_outer_zero_values():
    mdp, anchors = _single_anchor([0.3, 0.7])
    cfg = OppqConfig(0.1, 0.1, 0.9, anchors)
    st = outer_reference(GenerativeModel(mdp, 0), np.zeros(2), anchors, cfg, 0)
    assert st.w[0] == st.z[0] == st.sigma[0] == 0.0
    assert st.eps[0] == pytest.approx(2.0 * cfg.log_term / (0.1 * cfg.m**0.75), rel=1e-12)
    assert st.w_bar[0] == 0.0


def test_outer_point_mass_has_zero_variance():
    mdp, anchors = _single_anchor([0.0, 1.0])
    cfg = OppqConfig(0.1, 0.1, 0.9, anchors)
    st = outer_reference(GenerativeModel(mdp, 0), np.array([1.0, 3.0]), anchors, cfg, 0)
    assert st.sigma[0] == 0.0 and st.w[0] == 3.0
    assert st.eps[0] == pytest.approx(2.0 * cfg.log_term * 10 / cfg.m**0.75, rel=1e-12)
    assert st.w_bar[0] == pytest.approx(3.0 - st.eps[0])


def test_outer_fair_row_variance_frozen():
    mdp, anchors = _single_anchor([0.5, 0.5])
    cfg = types.SimpleNamespace(m=10_000, horizon=10.0, outer_radius=lambda s: 0.0 * s)
    st = outer_reference(GenerativeModel(mdp, 0), np.array([0.0, 2.0]), anchors, cfg, 0)
    assert 0.9 <= st.sigma[0] <= 1.1
    assert st.sigma[0] == FAIR_SIGMA_SEED0


def test_inner_update_identical_values_and_deterministic_offset():
    mdp, anchors = _single_anchor([0.5, 0.5])
    cfg = OppqConfig(0.1, 0.1, 0.9, anchors)
    gm = GenerativeModel(mdp, 1)
    v = np.array([1.0, 2.0])
    ref = outer_reference(gm, v, anchors, cfg, 2)
    st = inner_update(gm, v, v, ref, anchors, cfg, 2, 1)
    assert st.w[0] == ref.w[0]
    assert st.eps[0] == pytest.approx(ref.eps[0] + 2.0 * 0.25 * math.sqrt(cfg.log_term / cfg.m1) * 10, rel=1e-14)
    assert 0.0 <= st.w_bar[0] <= 10.0
    with pytest.raises(ValueError):
        inner_update(gm, v, v, ref, anchors, cfg, 2, 0)
    # point-mass row: the offset is computed without sampling error
    mdp, anchors = _single_anchor([0.0, 1.0])
    gm = GenerativeModel(mdp, 1)
    ref = outer_reference(gm, v, anchors, cfg, 0)
    st = inner_update(gm, v + np.array([0.0, 0.25]), v, ref, anchors, cfg, 0, 3)
    assert st.w[0] == ref.w[0] + 0.25


def test_zero_rewards(instance):
    lm, anchors = instance
    zero = np.zeros_like(lm.rewards)
    mdp = DiscountedMdp(zero, lm.mdp.transitions, GAMMA)
    est = OPPQLearner(EPS, DELTA, anchors=anchors).fit(GenerativeModel(mdp, 0), lm.features, zero)
    assert np.all(est.params_.matrix == 0)
    assert policy_error(mdp, est.policy_) == 0.0


def test_run_audit_stack_and_monotone_growth(instance, solution):
    lm, anchors = instance
    model = CountingModel(GenerativeModel(lm.mdp, 4))
    snaps = []
    est = OPPQLearner(EPS, DELTA, anchors=anchors).fit(model, lm.features, lm.rewards, callback=snaps.append)
    cfg = est.config_
    k = 4
    closed = k * (cfg.n_outer + 1) * cfg.m + k * (cfg.n_outer + 1) * cfg.n_inner * cfg.m1
    assert model.draws == est.n_samples_used_ == closed == cfg.samples_required
    theta = est.params_
    assert len(theta) == cfg.max_stack_size
    assert theta.origins[0] == (0, 0)
    assert theta.origins[1:] == tuple((i, j) for i in range(cfg.n_outer + 1) for j in range(1, cfg.n_inner + 1))
    assert np.all((theta.matrix >= 0) & (theta.matrix <= 1 / (1 - GAMMA)))
    # V_theta never decreases along the run
    used = [s["v_used"] for s in snaps] + [est.values_]
    for a, b in zip(used, used[1:]):
        assert np.all(b >= a)
    assert len(est.trace_) == (cfg.n_outer + 1) * (cfg.n_inner + 1)
    assert est.trace_[-1]["samples_so_far"] == closed
    v, pi = stacked_values(lm.rewards, lm.features, GAMMA, theta.matrix)
    np.testing.assert_array_equal(v, est.values_)


def test_iter_state_invariants(instance):
    lm, anchors = instance
    snaps = []
    OPPQLearner(EPS, DELTA, anchors=anchors).fit(GenerativeModel(lm.mdp, 2), lm.features, lm.rewards,
                                                  callback=snaps.append)
    h = 1 / (1 - GAMMA)
    for snap in snaps:
        st = snap["state"]
        assert np.all((st.w_bar >= 0) & (st.w_bar <= h))
        inside = (st.w - st.eps >= 0) & (st.w - st.eps <= h)
        assert np.all(st.w_bar[inside] <= (st.w - st.eps)[inside])
        if st.j == 0:
            assert np.all(st.sigma >= 0)


def test_monotonicity_audit_cases():
    lm = two_state_linear()
    rep = monotonicity_audit(lm.mdp, lm.features, lm.rewards, StackedParams.zero(4))
    assert rep.holds and rep.worst_gap <= 0
    planted = StackedParams.zero(4).appended(np.array([10.0, 10.0, 10.0, 10.0]), (0, 1))
    rep = monotonicity_audit(lm.mdp, lm.features, lm.rewards, planted)
    assert not rep.holds and rep.worst_gap > 0


def _runs(instance, seeds, **kw):
    lm, anchors = instance
    for seed in seeds:
        snaps = []
        est = OPPQLearner(EPS, DELTA, anchors=anchors, **kw)
        est.fit(GenerativeModel(lm.mdp, seed), lm.features, lm.rewards, callback=snaps.append)
        yield est, snaps


@pytest.mark.slow
def test_underestimation_confidence_and_halving(instance, solution):
    lm, anchors = instance
    p_k = lm.mdp.transitions[anchors.indices]
    sigma_star = variance_function(lm.mdp, solution.v_star).ravel()[anchors.indices]
    over = conf_bad = halving_bad = envelope_bad = audits = 0
    n_runs = 50
    for est, snaps in _runs(instance, range(n_runs)):
        cfg = est.config_
        h, lg = cfg.horizon, cfg.log_term
        if np.max(est.values_ - solution.v_star) > 1e-9:
            over += 1
        outer = [s for s in snaps if s["state"].j == 0]
        if any(np.any(np.abs(s["state"].w - p_k @ s["v_ref"]) > s["state"].eps) for s in outer):
            conf_bad += 1
        env = lambda i: (np.sqrt(lg * sigma_star / cfg.m) + lg * h / cfg.m**0.75  # noqa: E731
                         + 2.0**-i * math.sqrt(lg / cfg.m1) * h)
        if any(np.any(s["state"].eps > ENVELOPE_C * env(s["state"].i)) for s in snaps):
            envelope_bad += 1
        if monotonicity_audit(lm.mdp, lm.features, lm.rewards, est.params_, solution=solution).holds:
            audits += 1
            last_eps = {s["state"].i: s["state"].eps.max() for s in snaps}
            for s in outer[1:]:
                i = s["state"].i
                bound = 2 * GAMMA * h * last_eps[i - 1] + GAMMA**cfg.n_inner * h + 1e-9
                if np.max(solution.v_star - s["v_ref"]) > bound:
                    halving_bad += 1
                    break
    assert over / n_runs <= DELTA + 0.05
    assert conf_bad / n_runs <= DELTA
    assert envelope_bad == 0
    assert audits >= (1 - DELTA) * n_runs
    assert halving_bad <= DELTA * audits


def test_estimator_api_and_anchor_discovery(instance):
    lm, anchors = instance
    est = OPPQLearner(epsilon=EPS, delta=DELTA, C_outer=3.0)
    assert clone(est).get_params()["C_outer"] == 3.0
    est.fit(GenerativeModel(lm.mdp, 0), lm.features, lm.rewards)
    np.testing.assert_array_equal(est.config_.anchors.indices, anchors.indices)
    assert est.predict().shape == (30,)
    again = OPPQLearner(epsilon=EPS, delta=DELTA, C_outer=3.0, anchors=list(anchors.indices))
    again.fit(GenerativeModel(lm.mdp, 0), lm.features, lm.rewards)
    np.testing.assert_array_equal(again.params_.matrix, est.params_.matrix)


def test_requires_stochastic_features():
    mdp = two_state()
    with pytest.raises(ValueError, match="stochastic"):
        OPPQLearner(0.5, 0.1, anchors=[0, 1, 2, 3]).fit(GenerativeModel(mdp, 0), 2 * np.eye(4), mdp.rewards)

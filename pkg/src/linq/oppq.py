"""Variance-reduced phased parametric Q-learning with monotonicity preservation.

An outer loop estimates ``P_K V_ref`` (and its variance) from a large batch
for the current reference value function; an inner loop refines it with
small batches of offsets ``P_K (V - V_ref)``. Every estimate is shifted down
by an empirical-Bernstein style confidence radius and clipped to
``[0, 1/(1-gamma)]`` before it is appended to the parameter stack, which keeps
the decoded values below the true Bellman backup with high probability.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .base import PolicyLearner, check_problem
from .instances import AnchorSet, find_anchors, make_anchor_set
from .mdp import StackedParams, StackedValueTracker, bellman_apply_policy, stacked_values
from .oracle import DEFAULT_TOL, solve_optimal

def _ceil(x):
    """``ceil`` that ignores round-off just above an integer."""
    return math.ceil(x - 1e-9 * max(1.0, abs(x)))


DEFAULT_CONSTANTS = {"C_m": 1.0, "C_m1": 1.0, "C_outer": 2.0, "C_inner": 2.0, "C_Rp": 1.5, "C_R": 1.5}


@dataclass(frozen=True)
class OppqConfig:
    """Accuracy targets, anchors, constants and the derived schedule.

    ``n_outer`` (R'), ``n_inner`` (R), ``m`` and ``m1`` follow::

        R'  = ceil(C_Rp ln(1 / (eps (1-gamma))))
        R   = ceil(C_R R' / (1-gamma))
        m   = ceil(C_m  ln(R'RK/delta)^(4/3) / (eps^2 (1-gamma)^3))
        m1  = ceil(C_m1 ln(R'RK/delta) / (1-gamma)^2)
    """

    epsilon: float
    delta: float
    discount: float
    anchors: AnchorSet
    C_m: float = 1.0
    C_m1: float = 1.0
    C_outer: float = 2.0
    C_inner: float = 2.0
    C_Rp: float = 1.5
    C_R: float = 1.5
    n_outer: int = field(init=False)
    n_inner: int = field(init=False)
    log_term: float = field(init=False)
    m: int = field(init=False)
    m1: int = field(init=False)

    def __post_init__(self):
        for name in ("epsilon", "delta", "discount"):
            x = getattr(self, name)
            if not 0.0 < x < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {x}")
        for name in DEFAULT_CONSTANTS:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        h = 1.0 / (1.0 - self.discount)
        n_outer = max(1, _ceil(self.C_Rp * math.log(h / self.epsilon)))
        n_inner = max(1, _ceil(self.C_R * n_outer * h))
        log_term = math.log(n_outer * n_inner * self.anchors.n_features / self.delta)
        m = _ceil(self.C_m * log_term ** (4.0 / 3.0) * h**3 / self.epsilon**2)
        m1 = _ceil(self.C_m1 * log_term * h**2)
        if m1 < 1 or m < m1:
            raise ValueError(f"infeasible configuration: m = {m}, m1 = {m1}")
        for name, val in (("n_outer", n_outer), ("n_inner", n_inner), ("log_term", log_term), ("m", m), ("m1", m1)):
            object.__setattr__(self, name, val)

    @property
    def horizon(self):
        return 1.0 / (1.0 - self.discount)

    @property
    def constants(self):
        return {name: getattr(self, name) for name in DEFAULT_CONSTANTS}

    @property
    def samples_required(self):
        """Exact number of draws: ``K (R'+1) m + K (R'+1) R m1``."""
        k = self.anchors.n_features
        return k * (self.n_outer + 1) * self.m + k * (self.n_outer + 1) * self.n_inner * self.m1

    @property
    def max_stack_size(self):
        return 1 + (self.n_outer + 1) * self.n_inner

    def outer_radius(self, sigma):
        lg, m = self.log_term, self.m
        return self.C_outer * (np.sqrt(lg * sigma / m) + lg * self.horizon / m**0.75)

    def inner_increment(self, i):
        return self.C_inner * 2.0**-i * math.sqrt(self.log_term / self.m1) * self.horizon

    def realized(self):
        out = {"R_outer": self.n_outer, "R": self.n_inner, "m": self.m, "m1": self.m1,
               "log_term": self.log_term, "epsilon": self.epsilon, "delta": self.delta}
        out.update(self.constants)
        return out


@dataclass(frozen=True, eq=False)
class IterState:
    """Per-anchor estimates of one outer (``j == 0``) or inner iteration."""

    i: int
    j: int
    w: np.ndarray
    eps: np.ndarray
    w_bar: np.ndarray
    z: np.ndarray | None = None
    sigma: np.ndarray | None = None


def _shift_clip(w, eps, horizon):
    return np.clip(w - eps, 0.0, horizon)


def outer_reference(model, v_ref, anchors, cfg, i):
    """Estimate ``P_K V_ref`` and ``P_K V_ref^2`` with ``m`` draws per anchor.

    ``v_ref`` is the reference value function ``V_theta`` on all states.
    """
    v_ref = np.asarray(v_ref, dtype=np.float64)
    v_sq = v_ref * v_ref
    pairs = anchors.pairs(model.n_actions)
    w = np.empty(len(pairs))
    z = np.empty(len(pairs))
    for k, (s, a) in enumerate(pairs):
        w[k], z[k] = model.sample_mean(s, a, cfg.m, v_ref, v_sq)
    sigma = np.maximum(z - w * w, 0.0)
    eps = cfg.outer_radius(sigma)
    return IterState(i, 0, w, eps, _shift_clip(w, eps, cfg.horizon), z, sigma)


def inner_update(model, v_prev, v_ref, ref_state, anchors, cfg, i, j):
    """Estimate ``P_K V_prev`` as ``ref + P_K (V_prev - V_ref)`` with ``m1`` draws per anchor."""
    if j < 1:
        raise ValueError("inner iterations start at j = 1")
    diff = np.asarray(v_prev, dtype=np.float64) - np.asarray(v_ref, dtype=np.float64)
    pairs = anchors.pairs(model.n_actions)
    offset = np.array([model.sample_mean(s, a, cfg.m1, diff)[0] for s, a in pairs])
    w = offset + ref_state.w
    eps = ref_state.eps + cfg.inner_increment(i)
    return IterState(i, j, w, eps, _shift_clip(w, eps, cfg.horizon))


def _anchor_weights(features, anchors):
    """Feature rows in anchor coordinates, ``phi(s,a)^T Phi_K^{-1}``."""
    phi_k = features.values[anchors.indices]
    if np.array_equal(phi_k, np.eye(len(anchors.indices))):
        return features.values, None
    return anchors.weights, anchors.phi_K_inv


def _check_anchors(features, anchors, tol=1e-8):
    if not features.stochastic:
        raise ValueError("anchor-based learning requires stochastic features")
    if anchors.weights is None or anchors.weights.min() < -tol:
        raise ValueError("feature rows are not convex combinations of the anchors")


def oppq_learn(model, features, rewards, cfg, trace=None, callback=None):
    """Run the variance-reduced learner and return the parameter stack.

    ``callback``, when given, receives a dict after every outer and inner
    iteration with the :class:`IterState`, the value functions the batch was
    drawn against and the draw count so far. Arrays are copies.
    """
    features, rewards = check_problem(model, features, rewards)
    anchors = cfg.anchors
    _check_anchors(features, anchors)
    gamma = model.discount
    weights, to_features = _anchor_weights(features, anchors)

    tracker = StackedValueTracker(rewards, weights, gamma, [np.zeros(anchors.n_features)])
    ws = [np.zeros(features.n_features)]
    origins = [(0, 0)]
    start = model.samples_used
    t0 = time.perf_counter()

    def record(state, v_used, v_ref):
        if trace is not None:
            trace.append({
                "i": state.i, "j": state.j,
                "w_bar_min": float(state.w_bar.min()), "w_bar_max": float(state.w_bar.max()),
                "eps_max": float(state.eps.max()),
                "samples_so_far": model.samples_used - start,
                "wall_time": time.perf_counter() - t0,
            })
        if callback is not None:
            callback({"state": state, "v_used": v_used.copy(), "v_ref": v_ref.copy(),
                      "samples": model.samples_used - start, "stack_size": len(ws)})

    for i in range(cfg.n_outer + 1):
        v_ref = tracker.values.copy()
        ref = outer_reference(model, v_ref, anchors, cfg, i)
        record(ref, v_ref, v_ref)
        for j in range(1, cfg.n_inner + 1):
            v_prev = tracker.values.copy()
            state = inner_update(model, v_prev, v_ref, ref, anchors, cfg, i, j)
            tracker.append(state.w_bar)
            ws.append(state.w_bar if to_features is None else to_features @ state.w_bar)
            origins.append((i, j))
            record(state, v_prev, v_ref)
    return StackedParams(tuple(ws), tuple(origins))


@dataclass(frozen=True)
class MonotonicityReport:
    holds: bool
    worst_gap: float
    backup_gap: float
    optimality_gap: float


def monotonicity_audit(mdp, features, rewards, theta, tol=DEFAULT_TOL, solution=None):
    """Check ``V_theta <= T_{pi_theta} V_theta`` and ``V_theta <= v*`` pointwise.

    ``worst_gap`` is the largest violation over both checks (positive means
    violated); the audit holds when it does not exceed ``tol``.
    """
    ws = theta.matrix if isinstance(theta, StackedParams) else theta
    v, pi = stacked_values(rewards, features, mdp.discount, ws)
    if solution is None:
        solution = solve_optimal(mdp, tol)
    backup_gap = float(np.max(v - bellman_apply_policy(mdp, v, pi)))
    optimality_gap = float(np.max(v - solution.v_star))
    worst = max(backup_gap, optimality_gap)
    return MonotonicityReport(worst <= tol, worst, backup_gap, optimality_gap)


class OPPQLearner(PolicyLearner):
    """Estimator wrapper around :func:`oppq_learn`.

    Parameters
    ----------
    epsilon, delta : float
        Target accuracy and failure probability, both in ``(0, 1)``.
    anchors : AnchorSet or sequence of row indices, optional
        Anchor pairs; discovered from the features when omitted.
    C_m, C_m1, C_outer, C_inner, C_Rp, C_R : float
        Constants of the batch sizes, confidence radii and loop counts.

    Attributes
    ----------
    params_ : StackedParams
    config_ : OppqConfig
    policy_, values_ : ndarray
        Decoded greedy policy and ``V_theta`` over all states.
    trace_ : list of dict
    n_samples_used_ : int
    """

    def __init__(self, epsilon=0.1, delta=0.1, anchors=None, C_m=1.0, C_m1=1.0, C_outer=2.0, C_inner=2.0,
                 C_Rp=1.5, C_R=1.5):
        self.epsilon = epsilon
        self.delta = delta
        self.anchors = anchors
        self.C_m = C_m
        self.C_m1 = C_m1
        self.C_outer = C_outer
        self.C_inner = C_inner
        self.C_Rp = C_Rp
        self.C_R = C_R

    def make_config(self, discount, anchors):
        return OppqConfig(self.epsilon, self.delta, discount, anchors, C_m=self.C_m, C_m1=self.C_m1,
                          C_outer=self.C_outer, C_inner=self.C_inner, C_Rp=self.C_Rp, C_R=self.C_R)

    def fit(self, model, features, rewards, callback=None):
        features, rewards = check_problem(model, features, rewards)
        anchors = self.anchors
        if anchors is None:
            anchors = find_anchors(features)
        elif not isinstance(anchors, AnchorSet):
            anchors = make_anchor_set(features, anchors, anchored=True)
        cfg = self.make_config(model.discount, anchors)
        before = model.samples_used
        self.trace_ = []
        self.params_ = oppq_learn(model, features, rewards, cfg, trace=self.trace_, callback=callback)
        self.config_ = cfg
        self.n_samples_used_ = model.samples_used - before
        self.values_, self.policy_ = stacked_values(rewards, features, model.discount, self.params_.matrix)
        return self

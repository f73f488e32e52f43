"""Phased parametric Q-learning over a representative state-action set."""

import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .base import PolicyLearner, check_problem
from .instances import AnchorSet, find_anchors, make_anchor_set
from .mdp import BasicParams, basic_values


@dataclass(frozen=True)
class PpqConfig:
    """Budget and schedule for :func:`ppq_learn`.

    The number of rounds is ``R = ceil(c_R * ln(N) / (1 - gamma))``; each round
    spends ``floor(N / (K R))`` draws on every representative pair, and the
    remainder of the budget is left unused.
    """

    total_samples: int
    representative: AnchorSet
    discount: float
    rounds_coefficient: float = 4.0
    solve_rcond: float = 1e-12

    def __post_init__(self):
        if int(self.total_samples) != self.total_samples or self.total_samples < 1:
            raise ValueError(f"total_samples must be a positive integer, got {self.total_samples!r}")
        if not self.rounds_coefficient > 0:
            raise ValueError("rounds_coefficient must be positive")
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        if self.per_round < 1:
            raise ValueError(
                f"budget too small for configuration: N = {self.total_samples} over "
                f"K = {self.n_features} pairs and R = {self.n_rounds} rounds"
            )

    @property
    def n_features(self):
        return self.representative.n_features

    @property
    def n_rounds(self):
        return max(1, math.ceil(self.rounds_coefficient * math.log(self.total_samples) / (1.0 - self.discount)))

    @property
    def per_round(self):
        return self.total_samples // (self.n_features * self.n_rounds)

    @property
    def samples_required(self):
        return self.n_rounds * self.n_features * self.per_round

    def realized(self):
        return {"R": self.n_rounds, "per_round": self.per_round, "rounds_coefficient": self.rounds_coefficient,
                "L": self.representative.L}


def ppq_learn(model, features, rewards, cfg, trace=None):
    """Run phased parametric Q-learning and return the final :class:`BasicParams`.

    Every round estimates ``P(.|s_k,a_k)^T clip(V_w)`` on the representative
    pairs from fresh samples and solves ``Phi_K w = Q``.
    """
    features, rewards = check_problem(model, features, rewards)
    gamma = model.discount
    horizon = 1.0 / (1.0 - gamma)
    rep = cfg.representative
    phi_k = features.values[rep.indices]
    lu = scipy.linalg.lu_factor(phi_k)
    rcond = 1.0 / np.linalg.cond(phi_k)
    if rcond < cfg.solve_rcond:
        raise ValueError(f"Phi_K is too ill-conditioned (rcond {rcond:.3e})")
    pairs = rep.pairs(model.n_actions)
    n = cfg.per_round
    w = np.zeros(rep.n_features)
    start_count = model.samples_used
    t0 = time.perf_counter()
    for t in range(1, cfg.n_rounds + 1):
        v, _ = basic_values(rewards, features, gamma, w)
        v = np.clip(v, 0.0, horizon)
        q = np.array([model.sample_mean(s, a, n, v)[0] for s, a in pairs])
        w = scipy.linalg.lu_solve(lu, q)
        if trace is not None:
            trace.append({
                "round": t,
                "w_norm": float(np.linalg.norm(w)),
                "target_min": float(q.min()),
                "target_max": float(q.max()),
                "sample_count": model.samples_used - start_count,
                "wall_time": time.perf_counter() - t0,
            })
    return BasicParams(w)


class PPQLearner(PolicyLearner):
    """Estimator wrapper around :func:`ppq_learn`.

    Parameters
    ----------
    total_samples : int
        Sample budget ``N``.
    rounds_coefficient : float
        ``c_R`` in ``R = ceil(c_R ln N / (1 - gamma))``.
    representative : AnchorSet or sequence of row indices, optional
        Representative pairs; discovered as feature anchors when omitted.
    solve_rcond : float
        Smallest reciprocal condition number accepted for ``Phi_K``.

    Attributes
    ----------
    params_ : BasicParams
    config_ : PpqConfig
    policy_, values_ : ndarray
        Decoded greedy policy and ``V_w`` over all states.
    trace_ : list of dict
        One record per round.
    n_samples_used_ : int
    """

    def __init__(self, total_samples=1_000_000, rounds_coefficient=4.0, representative=None, solve_rcond=1e-12):
        self.total_samples = total_samples
        self.rounds_coefficient = rounds_coefficient
        self.representative = representative
        self.solve_rcond = solve_rcond

    def fit(self, model, features, rewards):
        features, rewards = check_problem(model, features, rewards)
        rep = self.representative
        if rep is None:
            rep = find_anchors(features)
        elif not isinstance(rep, AnchorSet):
            rep = make_anchor_set(features, rep)
        cfg = PpqConfig(self.total_samples, rep, model.discount, self.rounds_coefficient, self.solve_rcond)
        before = model.samples_used
        self.trace_ = []
        self.params_ = ppq_learn(model, features, rewards, cfg, trace=self.trace_)
        self.config_ = cfg
        self.n_samples_used_ = model.samples_used - before
        self.values_, self.policy_ = basic_values(rewards, features, model.discount, self.params_.w)
        return self

"""Discounted MDPs, linear transition models, Bellman operators and parameter decoders.

State-action pairs are indexed densely: row ``s * n_actions + a`` of every
``(S*A, .)`` matrix belongs to the pair ``(s, a)``. Action ties are always
broken towards the lowest index so that runs are bit-reproducible.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from ._validation import (
    ROW_SUM_ATOL,
    check_action,
    check_array,
    check_discount,
    check_policy,
    check_positive_int,
    check_state,
    check_stochastic_rows,
    check_value,
)

FACTOR_ATOL = 1e-10
# negative round-off allowed when a kernel is re-derived from factors
_CLIP_ATOL = 1e-12


@dataclass(frozen=True, eq=False)
class DiscountedMdp:
    """Tabular discounted MDP ``(S, A, P, r, gamma)``.

    ``rewards`` has shape ``(S, A)`` with entries in ``[0, 1]``; ``transitions``
    has shape ``(S*A, S)`` with row ``s*A + a`` equal to ``P(.|s, a)``.
    """

    rewards: np.ndarray
    transitions: np.ndarray
    discount: float

    def __post_init__(self):
        r = check_array(self.rewards, "rewards", ndim=2)
        n_states, n_actions = r.shape
        if np.any(r < 0) or np.any(r > 1):
            raise ValueError("rewards must lie in [0, 1]")
        p = check_array(self.transitions, "transitions", ndim=2, shape=(n_states * n_actions, n_states))
        check_stochastic_rows(p, "transitions")
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "transitions", p)
        object.__setattr__(self, "discount", check_discount(self.discount))

    @property
    def n_states(self):
        return self.rewards.shape[0]

    @property
    def n_actions(self):
        return self.rewards.shape[1]

    @property
    def horizon(self):
        """Effective horizon ``1 / (1 - gamma)``, also the upper value bound."""
        return 1.0 / (1.0 - self.discount)

    def row(self, s, a):
        return s * self.n_actions + a

    def transition_row(self, s, a):
        s = check_state(s, self.n_states)
        a = check_action(a, self.n_actions)
        return self.transitions[self.row(s, a)]

    def policy_matrix(self, pi):
        """Return ``(P^pi, r^pi)`` for a deterministic policy."""
        pi = check_policy(pi, self.n_states, self.n_actions)
        states = np.arange(self.n_states)
        return self.transitions[states * self.n_actions + pi], self.rewards[states, pi]


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Dense ``(S*A, K)`` matrix whose row ``s*A + a`` is ``phi(s, a)``.

    With ``stochastic=True`` every row must be a probability vector; with
    ``stochastic=None`` the flag is detected from the values.
    """

    values: np.ndarray
    stochastic: bool | None = None

    def __post_init__(self):
        v = check_array(self.values, "features", ndim=2)
        object.__setattr__(self, "values", v)
        if self.stochastic:
            check_stochastic_rows(v, "features")
        elif self.stochastic is None:
            ok = bool(np.all(v >= 0) and np.all(np.abs(v.sum(axis=1) - 1.0) <= ROW_SUM_ATOL))
            object.__setattr__(self, "stochastic", ok)

    @property
    def n_features(self):
        return self.values.shape[1]

    @property
    def n_rows(self):
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class LinearMdp:
    """A discounted MDP whose kernel factors as ``P = Phi @ Psi``."""

    mdp: DiscountedMdp
    features: FeatureMap
    psi: np.ndarray

    def __post_init__(self):
        phi = self.features.values
        if phi.shape[0] != self.mdp.n_states * self.mdp.n_actions:
            raise ValueError(
                f"features have {phi.shape[0]} rows but the MDP has "
                f"{self.mdp.n_states * self.mdp.n_actions} state-action pairs"
            )
        psi = check_array(self.psi, "psi", ndim=2, shape=(phi.shape[1], self.mdp.n_states))
        object.__setattr__(self, "psi", psi)
        resid = factorization_residual(self.mdp.transitions, phi, psi)
        if resid > FACTOR_ATOL:
            raise ValueError(f"transitions differ from features @ psi by {resid:.3e}")

    @classmethod
    def from_factors(cls, rewards, features, psi, discount):
        """Build the MDP by deriving ``P = Phi @ Psi`` from the factors."""
        if not isinstance(features, FeatureMap):
            features = FeatureMap(features)
        psi = np.asarray(psi, dtype=np.float64)
        p = features.values @ psi
        if np.any(p < -_CLIP_ATOL):
            raise ValueError("features @ psi has negative transition probabilities")
        p = np.clip(p, 0.0, None)
        return cls(DiscountedMdp(rewards, p, discount), features, psi)

    @property
    def n_states(self):
        return self.mdp.n_states

    @property
    def n_actions(self):
        return self.mdp.n_actions

    @property
    def n_features(self):
        return self.features.n_features

    @property
    def rewards(self):
        return self.mdp.rewards

    @property
    def discount(self):
        return self.mdp.discount


def factorization_residual(transitions, features, psi):
    """Max-norm distance ``||P - Phi Psi||_max``."""
    if isinstance(features, FeatureMap):
        features = features.values
    return float(np.abs(np.asarray(transitions) - features @ psi).max())


@dataclass(frozen=True, eq=False)
class BasicParams:
    """Single parameter vector ``w`` decoding to ``Q_w = r + gamma * phi^T w``."""

    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w", check_array(self.w, "w", ndim=1))


@dataclass(frozen=True, eq=False)
class StackedParams:
    """Ordered collection of parameter vectors with their ``(outer, inner)`` origins.

    Decodes to ``V(s) = max_h max_a r(s,a) + gamma * phi(s,a)^T w_h``.
    """

    ws: tuple
    origins: tuple = field(default=())

    def __post_init__(self):
        ws = tuple(check_array(w, "w", ndim=1) for w in self.ws)
        if ws and len({w.shape for w in ws}) != 1:
            raise ValueError("all parameter vectors must have the same length")
        origins = tuple(tuple(int(x) for x in o) for o in self.origins) if self.origins else ((0, 0),) * len(ws)
        if len(origins) != len(ws):
            raise ValueError("origins and ws must have the same length")
        object.__setattr__(self, "ws", ws)
        object.__setattr__(self, "origins", origins)

    @classmethod
    def zero(cls, n_features):
        return cls((np.zeros(n_features),), ((0, 0),))

    def __len__(self):
        return len(self.ws)

    def appended(self, w, origin):
        return StackedParams(self.ws + (w,), self.origins + (tuple(origin),))

    @property
    def matrix(self):
        if not self.ws:
            raise ValueError("empty parameter set")
        return np.vstack(self.ws)

    def to_dict(self):
        return {
            "n_features": len(self.ws[0]) if self.ws else 0,
            "params": [
                {"outer": o[0], "inner": o[1], "w": [float(x) for x in w]} for w, o in zip(self.ws, self.origins)
            ],
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            tuple(np.asarray(p["w"], dtype=np.float64) for p in doc["params"]),
            tuple((p["outer"], p["inner"]) for p in doc["params"]),
        )


# --- Bellman operators -------------------------------------------------------


def q_from_values(mdp, v):
    """``Q(s,a) = r(s,a) + gamma * P(.|s,a)^T v`` as an ``(S, A)`` array."""
    v = check_value(v, mdp.n_states)
    return mdp.rewards + mdp.discount * (mdp.transitions @ v).reshape(mdp.n_states, mdp.n_actions)


def bellman_apply(mdp, v):
    """Optimality backup ``T v``."""
    return q_from_values(mdp, v).max(axis=1)


def bellman_apply_policy(mdp, v, pi):
    """Policy backup ``T_pi v``."""
    v = check_value(v, mdp.n_states)
    p_pi, r_pi = mdp.policy_matrix(pi)
    return r_pi + mdp.discount * (p_pi @ v)


def greedy_policy(mdp, v):
    """Greedy policy w.r.t. ``v`` (lowest action index on ties)."""
    return q_from_values(mdp, v).argmax(axis=1)


# --- parameter decoders ------------------------------------------------------


def _feature_values(features):
    return features.values if isinstance(features, FeatureMap) else np.asarray(features, dtype=np.float64)


def feature_dot(phi, ws):
    """``phi @ ws.T`` accumulated feature by feature in a fixed order.

    Every entry is computed by the same sequence of floating-point operations
    whatever the number of columns, so decoding a parameter alone, inside a
    stack or incrementally gives bit-identical values.
    """
    ws = np.atleast_2d(ws)
    out = np.zeros((phi.shape[0], ws.shape[0]))
    for k in range(phi.shape[1]):
        out += phi[:, k, None] * ws[None, :, k]
    return out


def basic_q(rewards, features, discount, w):
    """``Q_w`` over all pairs as an ``(S, A)`` array."""
    rewards = np.asarray(rewards)
    phi = _feature_values(features)
    return rewards + discount * feature_dot(phi, np.asarray(w, dtype=np.float64)).reshape(rewards.shape)


def basic_values(rewards, features, discount, w):
    """Vectorised ``(V_w, pi_w)`` over all states."""
    q = basic_q(rewards, features, discount, w)
    return q.max(axis=1), q.argmax(axis=1)


def stacked_values(rewards, features, discount, ws, chunk=256):
    """Vectorised ``(V_theta, pi_theta)`` over all states.

    Ties go to the lowest parameter index, then the lowest action.
    """
    rewards = np.asarray(rewards)
    phi = _feature_values(features)
    ws = np.atleast_2d(np.asarray(ws, dtype=np.float64))
    if ws.shape[0] == 0:
        raise ValueError("theta must be nonempty")
    n_states, n_actions = rewards.shape
    best_v = np.full(n_states, -np.inf)
    best_a = np.zeros(n_states, dtype=np.int64)
    for start in range(0, ws.shape[0], chunk):
        block = ws[start : start + chunk]
        q = rewards[:, :, None] + discount * feature_dot(phi, block).reshape(n_states, n_actions, -1)
        per_h = q.max(axis=1)
        h = per_h.argmax(axis=1)
        v = per_h[np.arange(n_states), h]
        better = v > best_v
        if np.any(better):
            idx = np.flatnonzero(better)
            best_v[idx] = v[idx]
            best_a[idx] = q[idx, :, h[idx]].argmax(axis=1)
    return best_v, best_a


class StackedValueTracker:
    """Incrementally maintained ``V_theta`` and ``pi_theta`` under appends.

    Appending ``w`` costs one ``(S*A, K)`` product; the result is bit-identical
    to :func:`stacked_values` on the full stack, including tie-breaking.
    """

    def __init__(self, rewards, features, discount, ws=()):
        self.rewards = np.asarray(rewards)
        self.phi = _feature_values(features)
        self.discount = float(discount)
        n_states = self.rewards.shape[0]
        self.values = np.full(n_states, -np.inf)
        self.actions = np.zeros(n_states, dtype=np.int64)
        for w in ws:
            self.append(w)

    def append(self, w):
        q = basic_q(self.rewards, self.phi, self.discount, w)
        v = q.max(axis=1)
        better = v > self.values
        self.values = np.where(better, v, self.values)
        self.actions = np.where(better, q.argmax(axis=1), self.actions)


def decode_basic(mdp, features, w, s):
    """``(V_w(s), pi_w(s))`` for one state."""
    s = check_state(s, mdp.n_states)
    if isinstance(w, BasicParams):
        w = w.w
    phi = _feature_values(features)
    rows = phi[s * mdp.n_actions : (s + 1) * mdp.n_actions]
    q = mdp.rewards[s] + mdp.discount * feature_dot(rows, np.asarray(w, dtype=np.float64))[:, 0]
    a = int(q.argmax())
    return float(q[a]), a


def decode_stacked(mdp, features, theta, s):
    """``(V_theta(s), pi_theta(s))`` for one state."""
    s = check_state(s, mdp.n_states)
    ws = theta.matrix if isinstance(theta, StackedParams) else np.atleast_2d(np.asarray(theta, dtype=np.float64))
    if ws.size == 0:
        raise ValueError("theta must be nonempty")
    phi = _feature_values(features)
    rows = phi[s * mdp.n_actions : (s + 1) * mdp.n_actions]
    q = mdp.rewards[s][:, None] + mdp.discount * feature_dot(rows, ws)  # (A, Z)
    per_h = q.max(axis=0)
    h = int(per_h.argmax())
    a = int(q[:, h].argmax())
    return float(per_h[h]), a


# --- serialization -----------------------------------------------------------


def linear_mdp_to_dict(lm, metadata=None):
    """JSON-ready document; transitions are omitted and re-derived on load."""
    meta = {"seed": None, "generator": None, "name": None}
    meta.update(metadata or {})
    return {
        "n_states": lm.n_states,
        "n_actions": lm.n_actions,
        "discount": lm.discount,
        "rewards": lm.rewards.ravel().tolist(),
        "psi": lm.psi.ravel().tolist(),
        "features": lm.features.values.ravel().tolist(),
        "metadata": meta,
    }


def linear_mdp_from_dict(doc):
    """Inverse of :func:`linear_mdp_to_dict`; returns ``(LinearMdp, metadata)``."""
    try:
        n_states = check_positive_int(doc["n_states"], "n_states")
        n_actions = check_positive_int(doc["n_actions"], "n_actions")
        rewards = np.asarray(doc["rewards"], dtype=np.float64).reshape(n_states, n_actions)
        phi = np.asarray(doc["features"], dtype=np.float64)
        n_features, rem = divmod(phi.size, n_states * n_actions)
        if rem or n_features == 0:
            raise ValueError("features length is not a multiple of n_states * n_actions")
        phi = phi.reshape(n_states * n_actions, n_features)
        psi = np.asarray(doc["psi"], dtype=np.float64).reshape(n_features, n_states)
        lm = LinearMdp.from_factors(rewards, FeatureMap(phi), psi, doc["discount"])
    except KeyError as exc:
        raise ValueError(f"instance document is missing field {exc.args[0]!r}") from None
    return lm, dict(doc.get("metadata") or {})


def dumps_instance(lm, metadata=None):
    return json.dumps(linear_mdp_to_dict(lm, metadata), sort_keys=True) + "\n"


def save_instance(path, lm, metadata=None):
    with open(path, "w") as fh:
        fh.write(dumps_instance(lm, metadata))


def load_instance(path):
    with open(path) as fh:
        return linear_mdp_from_dict(json.load(fh))

"""Instance generators, anchor discovery and feature regularity."""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import linprog

from ._validation import check_discount, check_positive_int
from .mdp import DiscountedMdp, FeatureMap, LinearMdp

ANCHOR_TOL = 1e-8


class AnchorsNotFound(ValueError):
    """The feature rows have more convex-hull vertices than features."""

    def __init__(self, vertices, n_features):
        self.vertices = list(vertices)
        super().__init__(
            f"found {len(self.vertices)} convex-hull vertices for K = {n_features} features: {self.vertices}"
        )


@dataclass(frozen=True, eq=False)
class AnchorSet:
    """Representative (or anchor) state-action rows and derived quantities.

    ``weights`` holds ``phi(s,a)^T Phi_K^{-1}`` for every row; for anchor sets
    these are the convex-combination coefficients ``lambda``.
    """

    indices: np.ndarray
    phi_K: np.ndarray
    phi_K_inv: np.ndarray
    L: float
    anchored: bool = False
    weights: np.ndarray = field(default=None, repr=False)

    @property
    def n_features(self):
        return len(self.indices)

    def pairs(self, n_actions):
        return [divmod(int(i), n_actions) for i in self.indices]


def _phi(features):
    return features.values if isinstance(features, FeatureMap) else np.asarray(features, dtype=np.float64)


def regularity_L(features, indices, rows=None):
    """``max_{(s,a)} ||phi(s,a)^T Phi_K^{-1}||_1`` for the given representative rows.

    ``rows`` restricts the maximum to a subset of feature rows (all rows by default).
    """
    phi = _phi(features)
    indices = np.asarray(indices, dtype=np.int64)
    phi_k = phi[indices]
    if phi_k.shape[0] != phi_k.shape[1]:
        raise ValueError(f"need exactly K = {phi.shape[1]} representative rows, got {len(indices)}")
    cond = np.linalg.cond(phi_k)
    if not np.isfinite(cond) or cond > 1e12:
        raise ValueError(f"Phi_K is singular (condition number estimate {cond:.3e})")
    if rows is not None:
        phi = phi[np.asarray(rows, dtype=np.int64)]
    # phi Phi_K^{-1} == solve(Phi_K^T, phi^T)^T
    weights = scipy.linalg.solve(phi_k.T, phi.T).T
    return float(np.abs(weights).sum(axis=1).max())


def make_anchor_set(features, indices, anchored=False):
    phi = _phi(features)
    indices = np.asarray(indices, dtype=np.int64)
    phi_k = phi[indices].copy()
    L = regularity_L(phi, indices)
    phi_k_inv = scipy.linalg.inv(phi_k)
    weights = scipy.linalg.solve(phi_k.T, phi.T).T
    for arr in (indices, phi_k, phi_k_inv, weights):
        arr.setflags(write=False)
    return AnchorSet(indices, phi_k, phi_k_inv, L, anchored, weights)


def _simplex_point(rng, k, n):
    if k == 1:
        # the one-point simplex; dirichlet can return 1 - 2^-53 here
        return np.ones((n, 1))
    return rng.dirichlet(np.ones(k), size=n)


def _sparse_distributions(rng, n_rows, n_cols, support_fraction):
    """Rows of normalised exponentials on a random support of at least two states."""
    size = min(n_cols, max(2, int(np.ceil(support_fraction * n_cols))))
    out = np.zeros((n_rows, n_cols))
    for i in range(n_rows):
        cols = rng.choice(n_cols, size=size, replace=False)
        weights = rng.exponential(size=size)
        out[i, cols] = weights / weights.sum()
    return out


def _check_sizes(n_states, n_actions, n_features, anchored):
    n_states = check_positive_int(n_states, "n_states")
    n_actions = check_positive_int(n_actions, "n_actions")
    n_features = check_positive_int(n_features, "n_features")
    rows = n_states * n_actions
    if n_features > rows:
        raise ValueError(f"n_features = {n_features} exceeds the {rows} state-action pairs")
    if anchored and n_features > 1 and n_features > rows - n_features:
        raise ValueError(f"n_features = {n_features} leaves no room for non-anchor pairs among {rows}")
    return n_states, n_actions, n_features


def _assemble(rng, n_states, n_actions, n_features, gamma, psi, anchored, mixer):
    rows = n_states * n_actions
    anchor_rows = np.sort(rng.choice(rows, size=n_features, replace=False))
    phi = mixer(rows)
    if anchored:
        phi[anchor_rows] = np.eye(n_features)
    # a Dirichlet draw can (rarely) leave Phi_K ill-conditioned; redraw those rows
    while np.linalg.cond(phi[anchor_rows]) > 1e8:
        phi[anchor_rows] = mixer(n_features)
    rewards = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    lm = LinearMdp.from_factors(rewards, FeatureMap(phi), psi, gamma)
    return lm, make_anchor_set(phi, anchor_rows, anchored=anchored)


def make_random_linear_mdp(n_states, n_actions, n_features, gamma, seed, anchored=True, support_fraction=0.05):
    """Random linear MDP with stochastic features.

    ``K`` randomly designated rows are the representative set; with
    ``anchored=True`` they are the unit vectors and every other row is a
    uniform draw from the simplex, so ``L = 1``. ``psi`` rows are normalised
    exponentials on a random support covering ``support_fraction`` of states.
    """
    n_states, n_actions, n_features = _check_sizes(n_states, n_actions, n_features, anchored)
    gamma = check_discount(gamma)
    rng = np.random.default_rng(seed)
    psi = _sparse_distributions(rng, n_features, n_states, support_fraction)
    return _assemble(
        rng, n_states, n_actions, n_features, gamma, psi, anchored,
        lambda n: _simplex_point(rng, n_features, n),
    )


def make_soft_aggregation_mdp(n_states, n_actions, n_features, gamma, seed, identity_disaggregation=False):
    """Soft state aggregation: aggregation rows ``phi`` and disaggregation rows ``psi`` are both distributions.

    Every state-action pair mixes ``K`` latent meta-states, each emitting next
    states from a dense disaggregation distribution. With
    ``identity_disaggregation`` (requires ``K == S``) the meta-states are the
    states themselves and ``P = Phi`` is an arbitrary stochastic kernel.
    """
    n_states, n_actions, n_features = _check_sizes(n_states, n_actions, n_features, True)
    gamma = check_discount(gamma)
    rng = np.random.default_rng(seed)
    if identity_disaggregation:
        if n_features != n_states:
            raise ValueError("identity disaggregation requires n_features == n_states")
        psi = np.eye(n_states)
    else:
        psi = rng.dirichlet(np.ones(n_states), size=n_features)
    return _assemble(
        rng, n_states, n_actions, n_features, gamma, psi, True,
        lambda n: _simplex_point(rng, n_features, n),
    )


def make_random_tabular_mdp(n_states, n_actions, gamma, seed):
    """Unstructured tabular MDP with Dirichlet transition rows."""
    n_states = check_positive_int(n_states, "n_states")
    n_actions = check_positive_int(n_actions, "n_actions")
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(n_states), size=n_states * n_actions)
    rewards = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return DiscountedMdp(rewards, p, gamma)


@dataclass(frozen=True)
class Embedding:
    """Index map from an inner MDP into its lower-bound embedding."""

    inner_states: int
    inner_actions: int
    absorbing_state: int
    extra_action: int

    def restrict_policy(self, pi):
        """Restrict a policy on the embedding to the inner state space."""
        pi = np.asarray(pi)[: self.inner_states]
        if np.any(pi >= self.inner_actions):
            raise ValueError("policy uses the extra action on an inner state")
        return pi


def make_lower_bound_instance(inner):
    """Embed a tabular MDP into a linear MDP with ``K = S'A' + 1`` unit features.

    Adds one absorbing zero-reward state and one extra action. Inner pairs keep
    their dynamics and reward and get feature ``e_k``; every other pair moves to
    the absorbing state with reward 0 and gets feature ``e_K``.
    """
    s_in, a_in = inner.n_states, inner.n_actions
    n_states, n_actions = s_in + 1, a_in + 1
    k = s_in * a_in + 1
    absorbing = s_in
    phi = np.zeros((n_states * n_actions, k))
    psi = np.zeros((k, n_states))
    rewards = np.zeros((n_states, n_actions))
    anchor_rows = []
    for s in range(n_states):
        for a in range(n_actions):
            row = s * n_actions + a
            if s < s_in and a < a_in:
                j = s * a_in + a
                phi[row, j] = 1.0
                psi[j, :s_in] = inner.transitions[j]
                rewards[s, a] = inner.rewards[s, a]
                anchor_rows.append(row)
            else:
                phi[row, k - 1] = 1.0
    psi[k - 1, absorbing] = 1.0
    anchor_rows.append(absorbing * n_actions)
    lm = LinearMdp.from_factors(rewards, FeatureMap(phi), psi, inner.discount)
    return lm, make_anchor_set(phi, anchor_rows, anchored=True), Embedding(s_in, a_in, absorbing, a_in)


def perturb_kernel(lm, xi, seed):
    """Mix every transition row with a random distribution: ``(1 - xi) P + xi U``."""
    xi = float(xi)
    if not 0.0 <= xi <= 1.0:
        raise ValueError(f"xi must lie in [0, 1], got {xi}")
    rng = np.random.default_rng(seed)
    u = rng.dirichlet(np.ones(lm.n_states), size=lm.mdp.transitions.shape[0])
    p = lm.mdp.transitions if xi == 0.0 else (1.0 - xi) * lm.mdp.transitions + xi * u
    return DiscountedMdp(lm.rewards, p, lm.discount)


def _in_hull(point, others, tol):
    """Is ``point`` a convex combination of the rows of ``others``?"""
    n = others.shape[0]
    if n == 0:
        return False
    a_eq = np.vstack([others.T, np.ones((1, n))])
    b_eq = np.append(point, 1.0)
    res = linprog(np.zeros(n), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs",
                  options={"primal_feasibility_tolerance": tol})
    return res.status == 0


def _covered(points, vertices, tol):
    """Mask of rows of ``points`` lying in the convex hull of ``vertices``."""
    if vertices.shape[0] == vertices.shape[1] and np.linalg.cond(vertices) < 1e10:
        lam = scipy.linalg.solve(vertices.T, points.T).T
        return lam.min(axis=1) >= -tol
    return np.array([_in_hull(p, vertices, tol) for p in points], dtype=bool)


def find_anchors(features, tol=ANCHOR_TOL, seed=0):
    """Identify the convex-hull vertices of the feature rows.

    Duplicate rows are merged first (the lowest index represents the group).
    Unique maximisers of random linear functionals seed the vertex set; rows
    outside the hull of the known vertices are then settled one feasibility
    program each. Returns an anchored :class:`AnchorSet` when there are exactly
    ``K`` vertices and raises :class:`AnchorsNotFound` listing them otherwise.
    """
    phi = _phi(features)
    fm = features if isinstance(features, FeatureMap) else FeatureMap(phi)
    if not fm.stochastic:
        raise ValueError("anchor discovery requires stochastic features")
    k = phi.shape[1]
    _, first = np.unique(np.round(phi / tol) * tol, axis=0, return_index=True)
    order = np.sort(first)
    cand = phi[order]
    n = len(order)

    rng = np.random.default_rng(seed)
    is_vertex = np.zeros(n, dtype=bool)
    for c in rng.standard_normal((20 * k + 20, k)):
        score = cand @ c
        top = np.argsort(score)[-2:]
        if n == 1 or score[top[1]] - score[top[0]] > tol:
            is_vertex[top[-1]] = True

    settled = is_vertex.copy()
    settled[~is_vertex] = _covered(cand[~is_vertex], cand[is_vertex], tol)
    for i in np.flatnonzero(~settled):
        if not _in_hull(cand[i], np.delete(cand, i, axis=0), tol):
            is_vertex[i] = True
    vertices = [int(order[i]) for i in np.flatnonzero(is_vertex)]
    if len(vertices) > k:
        raise AnchorsNotFound(vertices, k)
    if len(vertices) < k:
        raise ValueError(f"feature rows span only {len(vertices)} vertices for K = {k}")
    anchors = make_anchor_set(phi, vertices, anchored=True)
    if anchors.weights.min() < -tol:
        raise ValueError("some feature rows are not convex combinations of the vertices")
    return anchors

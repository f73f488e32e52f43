"""Exact ground truth: optimal values, policy evaluation, variances and realizability checks."""

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._validation import check_policy, check_value
from .mdp import FeatureMap, bellman_apply, q_from_values

DEFAULT_TOL = 1e-9


class ConvergenceError(RuntimeError):
    """Value iteration did not reach the requested tolerance."""


@dataclass(frozen=True, eq=False)
class ExactSolution:
    v_star: np.ndarray
    q_star: np.ndarray
    pi_star: np.ndarray
    residual: float
    tol: float
    iterations: int = 0

    def to_dict(self, instance_hash=None):
        return {
            "instance_sha256": instance_hash,
            "tol": self.tol,
            "residual": self.residual,
            "iterations": self.iterations,
            "v_star": self.v_star.tolist(),
            "q_star": self.q_star.ravel().tolist(),
            "pi_star": self.pi_star.tolist(),
            "n_actions": int(self.q_star.shape[1]),
        }

    @classmethod
    def from_dict(cls, doc):
        v = np.asarray(doc["v_star"], dtype=np.float64)
        q = np.asarray(doc["q_star"], dtype=np.float64).reshape(len(v), doc["n_actions"])
        return cls(v, q, np.asarray(doc["pi_star"], dtype=np.int64), float(doc["residual"]), float(doc["tol"]),
                   int(doc.get("iterations", 0)))


def instance_hash(text):
    """SHA-256 of a serialized instance, used to key cached solutions."""
    if not isinstance(text, bytes):
        text = text.encode()
    return hashlib.sha256(text).hexdigest()


def dumps_solution(solution, instance_sha=None):
    return json.dumps(solution.to_dict(instance_sha), sort_keys=True) + "\n"


def solve_optimal(mdp, tol=DEFAULT_TOL, max_iter=1_000_000):
    """Value iteration from ``v = 0`` until ``||v - v*||_inf <= tol`` is guaranteed.

    Stops once ``||T v - v||_inf <= tol * (1 - gamma) / (2 * gamma)``.
    """
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    gamma = mdp.discount
    threshold = tol * (1.0 - gamma) / (2.0 * gamma)
    v = np.zeros(mdp.n_states)
    for it in range(1, max_iter + 1):
        tv = bellman_apply(mdp, v)
        resid = float(np.abs(tv - v).max())
        v = tv
        if resid <= threshold:
            break
    else:
        raise ConvergenceError(
            f"value iteration did not converge in {max_iter} iterations "
            f"(last residual {resid:.3e}, threshold {threshold:.3e}, gamma={gamma})"
        )
    q = q_from_values(mdp, v)
    return ExactSolution(
        v_star=v,
        q_star=q,
        pi_star=q.argmax(axis=1),
        residual=float(np.abs(q.max(axis=1) - v).max()),
        tol=float(tol),
        iterations=it,
    )


def evaluate_policy(mdp, pi, tol=DEFAULT_TOL, method="direct", max_iter=1_000_000):
    """Value function ``v^pi`` of a deterministic policy.

    ``method="direct"`` solves ``(I - gamma P^pi) v = r^pi``; ``"iterative"``
    iterates ``T_pi`` from zero until within ``tol`` of the fixed point.
    """
    p_pi, r_pi = mdp.policy_matrix(pi)
    gamma = mdp.discount
    if method == "direct":
        a = np.eye(mdp.n_states) - gamma * p_pi
        try:
            return scipy.linalg.solve(a, r_pi)
        except scipy.linalg.LinAlgError as exc:
            raise RuntimeError(f"policy evaluation system is singular: {exc}") from exc
    if method == "iterative":
        if not tol > 0:
            raise ValueError(f"tol must be positive, got {tol}")
        threshold = tol * (1.0 - gamma) / gamma
        v = np.zeros(mdp.n_states)
        for _ in range(max_iter):
            nv = r_pi + gamma * (p_pi @ v)
            done = np.abs(nv - v).max() <= threshold
            v = nv
            if done:
                return v
        raise ConvergenceError(f"policy iteration did not converge in {max_iter} sweeps")
    raise ValueError(f"unknown method {method!r}")


def policy_error(mdp, pi, tol=DEFAULT_TOL, solution=None):
    """``max_s v*(s) - v^pi(s)``, clamped at zero."""
    if solution is None:
        solution = solve_optimal(mdp, tol)
    v_pi = evaluate_policy(mdp, pi, tol)
    return max(float(np.max(solution.v_star - v_pi)), 0.0)


def variance_function(mdp, v):
    """``sigma_{s,a}[v] = P v^2 - (P v)^2`` as an ``(S, A)`` array, clamped at zero."""
    v = check_value(v, mdp.n_states)
    pv = mdp.transitions @ v
    pv2 = mdp.transitions @ (v * v)
    return np.maximum(pv2 - pv * pv, 0.0).reshape(mdp.n_states, mdp.n_actions)


def _span_basis(features, rewards=None):
    phi = features.values if isinstance(features, FeatureMap) else np.asarray(features, dtype=np.float64)
    if rewards is None:
        return phi
    return np.column_stack([np.asarray(rewards).ravel(), phi])


def _lstsq_residual(basis, target):
    coef, *_ = np.linalg.lstsq(basis, target, rcond=None)
    return float(np.abs(target - basis @ coef).max())


def check_span(mdp, features, pi, tol=DEFAULT_TOL):
    """Max-norm residual of fitting ``Q^pi - r`` by ``Phi c`` in least squares."""
    pi = check_policy(pi, mdp.n_states, mdp.n_actions)
    v_pi = evaluate_policy(mdp, pi, tol)
    q_pi = q_from_values(mdp, v_pi).ravel()
    return _lstsq_residual(_span_basis(features), q_pi - mdp.rewards.ravel())


def bellman_closure_residual(mdp, features, q):
    """Distance from ``T Q`` to ``Span(r, phi)`` in max norm (least-squares projection).

    ``q`` is an ``(S, A)`` or flat ``(S*A,)`` Q-function.
    """
    q = np.asarray(q, dtype=np.float64).reshape(mdp.n_states, mdp.n_actions)
    tq = q_from_values(mdp, q.max(axis=1)).ravel()
    return _lstsq_residual(_span_basis(features, mdp.rewards), tq)


def _representative_rows(phi):
    """K well-conditioned rows of ``phi`` chosen by column-pivoted QR of ``phi^T``."""
    _, _, piv = scipy.linalg.qr(phi.T, pivoting=True, mode="economic")
    return np.sort(piv[: phi.shape[1]])


def fit_linear_model(mdp, features, anchors=None):
    """Fit ``Psi`` from ``P`` and ``Phi`` and bound the misspecification ``xi``.

    Returns ``(psi_hat, xi_hat)`` where ``xi_hat`` is the largest per-row total
    variation between ``P(.|s,a)`` and ``phi(s,a)^T psi_hat``. Any ``psi_hat``
    yields an upper bound on the best achievable ``xi``; the tighter of a global
    least-squares fit and a fit through ``K`` representative rows is returned.
    """
    phi = features.values if isinstance(features, FeatureMap) else np.asarray(features, dtype=np.float64)
    k = phi.shape[1]
    rank = np.linalg.matrix_rank(phi)
    if rank < k:
        raise ValueError(f"features are rank deficient: rank {rank} < K = {k}")
    p = mdp.transitions

    def tv(psi):
        return float(0.5 * np.abs(p - phi @ psi).sum(axis=1).max())

    psi_ls, *_ = np.linalg.lstsq(phi, p, rcond=None)
    best = (tv(psi_ls), psi_ls)
    rows = anchors.indices if anchors is not None else _representative_rows(phi)
    phi_k = phi[np.asarray(rows)]
    if np.linalg.cond(phi_k) < 1e12:
        psi_k = scipy.linalg.solve(phi_k, p[np.asarray(rows)])
        cand = (tv(psi_k), psi_k)
        if cand[0] < best[0]:
            best = cand
    return best[1], best[0]


def total_variance_bound(mdp, solution):
    """``||(I - gamma P^{pi*})^{-1} sqrt(sigma_{v*}^{pi*})||_inf * (1 - gamma)^{3/2}``."""
    gamma = mdp.discount
    sigma = variance_function(mdp, solution.v_star)
    states = np.arange(mdp.n_states)
    sd = np.sqrt(sigma[states, solution.pi_star])
    p_pi, _ = mdp.policy_matrix(solution.pi_star)
    x = scipy.linalg.solve(np.eye(mdp.n_states) - gamma * p_pi, sd)
    return float(np.abs(x).max() * (1.0 - gamma) ** 1.5)

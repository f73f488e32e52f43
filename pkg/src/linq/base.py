"""Estimator plumbing shared by the learners."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_array
from .mdp import FeatureMap


def check_problem(model, features, rewards):
    """Validate the ``fit`` inputs against the generative model's sizes.

    Returns ``(FeatureMap, rewards)``.
    """
    for attr in ("n_states", "n_actions", "discount", "sample_histogram"):
        if not hasattr(model, attr):
            raise TypeError(f"model must be a generative model; missing {attr!r}")
    if not isinstance(features, FeatureMap):
        features = FeatureMap(features)
    rewards = check_array(rewards, "rewards", ndim=2, shape=(model.n_states, model.n_actions))
    if features.n_rows != model.n_states * model.n_actions:
        raise ValueError(
            f"features have {features.n_rows} rows, expected {model.n_states * model.n_actions}"
        )
    return features, rewards


class PolicyLearner(BaseEstimator):
    """Mixin providing ``predict`` / ``predict_value`` from the decoded policy tables.

    Subclasses set ``policy_`` and ``values_`` (length ``S``) in ``fit``.
    """

    def _states(self, states):
        check_is_fitted(self, "policy_")
        if states is None:
            return np.arange(len(self.policy_))
        states = np.asarray(states)
        if states.ndim > 1:
            states = states.ravel()
        if not np.issubdtype(states.dtype, np.integer) or np.any(states < 0) or np.any(states >= len(self.policy_)):
            raise ValueError("states must be integer indices in [0, n_states)")
        return states

    def predict(self, states=None):
        """Greedy action for each state (all states when ``states`` is None)."""
        idx = self._states(states)
        return self.policy_[idx]

    def predict_value(self, states=None):
        """Decoded value estimate for each state."""
        idx = self._states(states)
        return self.values_[idx]

"""Input validation helpers shared by the solvers and estimators."""

import numbers

import numpy as np

ROW_SUM_ATOL = 1e-12


def check_array(x, name, ndim=None, shape=None, dtype=np.float64):
    """Return ``x`` as a read-only contiguous array, checking rank, shape and finiteness."""
    arr = np.array(x, dtype=dtype, copy=True)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if shape is not None:
        for axis, (got, want) in enumerate(zip(arr.shape, shape)):
            if want is not None and got != want:
                raise ValueError(f"{name} has shape {arr.shape}; axis {axis} must be {want}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


def check_positive_int(x, name):
    if isinstance(x, bool) or not isinstance(x, numbers.Integral) or x < 1:
        raise ValueError(f"{name} must be a positive integer, got {x!r}")
    return int(x)


def check_discount(gamma):
    gamma = float(gamma)
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"discount must lie in (0, 1), got {gamma}")
    return gamma


def check_open_unit(x, name):
    x = float(x)
    if not 0.0 < x < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {x}")
    return x


def check_stochastic_rows(mat, name, atol=ROW_SUM_ATOL):
    """Raise unless every row of ``mat`` is a probability vector."""
    if np.any(mat < 0):
        r = int(np.argwhere(mat < 0)[0][0])
        raise ValueError(f"{name} row {r} has a negative entry")
    dev = np.abs(mat.sum(axis=1) - 1.0)
    if dev.size and dev.max() > atol:
        r = int(dev.argmax())
        raise ValueError(f"{name} row {r} sums to {mat[r].sum()!r}, not 1")


def check_state(s, n_states):
    if isinstance(s, bool) or not isinstance(s, numbers.Integral) or not 0 <= s < n_states:
        raise ValueError(f"state {s!r} out of range [0, {n_states})")
    return int(s)


def check_action(a, n_actions):
    if isinstance(a, bool) or not isinstance(a, numbers.Integral) or not 0 <= a < n_actions:
        raise ValueError(f"action {a!r} out of range [0, {n_actions})")
    return int(a)


def check_policy(pi, n_states, n_actions):
    pi = np.asarray(pi)
    if pi.shape != (n_states,):
        raise ValueError(f"policy must have shape ({n_states},), got {pi.shape}")
    if not np.issubdtype(pi.dtype, np.integer):
        if not np.all(np.mod(pi, 1) == 0):
            raise ValueError("policy entries must be integer action indices")
        pi = pi.astype(np.int64)
    if np.any(pi < 0) or np.any(pi >= n_actions):
        bad = int(np.argwhere((pi < 0) | (pi >= n_actions))[0][0])
        raise ValueError(f"policy maps state {bad} to out-of-range action {pi[bad]}")
    return pi.astype(np.int64)


def check_value(v, n_states, name="value vector"):
    return check_array(v, name, ndim=1, shape=(n_states,))

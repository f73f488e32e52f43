"""Seeded generative model answering i.i.d. next-state queries."""

import numpy as np

from ._validation import check_action, check_state

# draws per vectorised inverse-CDF batch; bounds peak memory only
_CHUNK = 1 << 20


class GenerativeModel:
    """Sampler over ``P(.|s, a)`` with an exact draw counter.

    Draws use inverse-CDF lookup on cached cumulative rows restricted to the
    row's support. For a fixed ``seed`` the sample sequence depends only on the
    sequence of queries.

    Only ``n_states``, ``n_actions`` and ``discount`` are meant to be read by
    learners; the kernel itself stays behind :meth:`sample_next`.
    """

    def __init__(self, mdp, seed=0):
        self._mdp = mdp
        self.seed = int(seed)
        self._rng = np.random.default_rng(np.random.PCG64(self.seed))
        self._cache = {}
        self.samples_used = 0

    @property
    def n_states(self):
        return self._mdp.n_states

    @property
    def n_actions(self):
        return self._mdp.n_actions

    @property
    def discount(self):
        return self._mdp.discount

    def _cdf(self, s, a):
        key = (s, a)
        hit = self._cache.get(key)
        if hit is None:
            row = self._mdp.transitions[s * self._mdp.n_actions + a]
            support = np.flatnonzero(row > 0)
            cdf = np.cumsum(row[support])
            cdf /= cdf[-1]
            hit = (support, cdf)
            self._cache[key] = hit
        return hit

    def _draw_positions(self, cdf, n):
        u = self._rng.random(n)
        pos = np.searchsorted(cdf, u, side="right")
        return np.minimum(pos, len(cdf) - 1, out=pos)

    def _check(self, s, a, n):
        s = check_state(s, self.n_states)
        a = check_action(a, self.n_actions)
        if isinstance(n, bool) or int(n) != n or n < 1:
            raise ValueError(f"sample count must be a positive integer, got {n!r}")
        return s, a, int(n)

    def sample_next(self, s, a, n=1):
        """Return ``n`` i.i.d. next states drawn from ``P(.|s, a)``."""
        s, a, n = self._check(s, a, n)
        support, cdf = self._cdf(s, a)
        out = np.empty(n, dtype=np.int64)
        for start in range(0, n, _CHUNK):
            stop = min(n, start + _CHUNK)
            out[start:stop] = support[self._draw_positions(cdf, stop - start)]
        self.samples_used += n
        return out

    def sample_histogram(self, s, a, n):
        """Visit counts (length ``S``) of ``n`` draws from ``P(.|s, a)``.

        Consumes the generator exactly as ``sample_next(s, a, n)`` would and
        returns ``bincount`` of the same draws, without materialising them.
        """
        s, a, n = self._check(s, a, n)
        support, cdf = self._cdf(s, a)
        counts = np.zeros(len(support), dtype=np.int64)
        for start in range(0, n, _CHUNK):
            stop = min(n, start + _CHUNK)
            counts += np.bincount(self._draw_positions(cdf, stop - start), minlength=len(support))
        self.samples_used += n
        full = np.zeros(self.n_states, dtype=np.int64)
        full[support] = counts
        return full

    def sample_mean(self, s, a, n, *functions):
        """Empirical means of each value vector in ``functions`` over ``n`` draws."""
        counts = self.sample_histogram(s, a, n)
        idx = np.flatnonzero(counts)
        c = counts[idx]
        return tuple(float(c @ np.asarray(f)[idx]) / n for f in functions)


def sample_next(gm, s, a, n=1):
    return gm.sample_next(s, a, n)


def sample_count(gm):
    return gm.samples_used


class CountingModel:
    """Transparent proxy that independently tallies every draw routed through it."""

    def __init__(self, model):
        self._model = model
        self.draws = 0
        self.calls = 0

    def __getattr__(self, name):
        return getattr(self._model, name)

    def sample_next(self, s, a, n=1):
        out = self._model.sample_next(s, a, n)
        self.draws += len(out)
        self.calls += 1
        return out

    def sample_histogram(self, s, a, n):
        counts = self._model.sample_histogram(s, a, n)
        self.draws += int(counts.sum())
        self.calls += 1
        return counts

    def sample_mean(self, s, a, n, *functions):
        counts = self.sample_histogram(s, a, n)
        idx = np.flatnonzero(counts)
        c = counts[idx]
        return tuple(float(c @ np.asarray(f)[idx]) / n for f in functions)

"""Evaluation metrics under leave-one-out: Hit@K, Gain, Recall@K, NDCG@K,
plus unpopular-target selection.

Ranking convention everywhere: higher score wins, exact ties broken by
ascending item id, and a user's training items are excluded from their
candidate pool when ``exclude_seen`` is set (the default, matching how
recommendation lists are produced).
"""

from __future__ import annotations

import numpy as np

from .data import DataError
from .models import Scorer

UNDEFINED_GAIN = float("nan")


class RankCache:
    """Clean score matrix with seen-items masked, shared across attack and
    metric calls on one checkpoint."""

    def __init__(self, params, enc, scorer=None, exclude_seen=True):
        self.params = params
        self.enc = enc
        self.scorer = scorer if scorer is not None else Scorer(params, enc)
        self.exclude_seen = exclude_seen
        sc = self.scorer.scores().copy()
        if exclude_seen:
            for u in range(enc.table.num_users):
                sc[u, enc.table.user_items[u]] = -np.inf
        self.masked = sc
        self._item_ids = np.arange(enc.table.num_items)

    def thresholds_excluding(self, i, k, users=None, include_target=False):
        """Per-user score of the k-th ranked candidate, with the target item
        removed from the pool unless include_target is set."""
        sc = self.masked if users is None else self.masked[users]
        if sc.shape[1] <= k:
            raise DataError(f"k={k} must be smaller than the item catalog")
        if include_target:
            part = np.partition(sc, sc.shape[1] - k, axis=1)
            return part[:, sc.shape[1] - k]
        drop = np.delete(sc, i, axis=1)
        part = np.partition(drop, drop.shape[1] - k, axis=1)
        return part[:, drop.shape[1] - k]

    def hit_mask(self, i, k, column_updates=None):
        """Boolean per user: does item i rank within the top k candidates?

        ``column_updates`` maps item id -> replacement score column (len U),
        used to apply a perturbation without copying the whole matrix.
        """
        sc = self.masked
        updates = column_updates or {}

        def col(j):
            if j in updates:
                c = updates[j]
                if self.exclude_seen:
                    c = np.where(np.isinf(sc[:, j]), -np.inf, c)
                return c
            return sc[:, j]

        target = col(i)
        base_gt = (sc > target[:, None]).sum(axis=1)
        base_eq_lower = ((sc == target[:, None]) & (self._item_ids[None, :] < i)).sum(axis=1)
        higher = base_gt + base_eq_lower
        # patch the columns whose scores changed (and the target's own column)
        for j in set(updates) | {i}:
            old = sc[:, j]
            higher -= (old > target).astype(np.int64)
            higher -= ((old == target) & (j < i)).astype(np.int64)
            if j != i:
                new = col(j)
                higher += (new > target).astype(np.int64)
                higher += ((new == target) & (j < i)).astype(np.int64)
        finite = np.isfinite(target)
        return finite & (higher <= k - 1)


def hit_count(params, enc, i, k, delta=None, cache=None):
    """Number of users whose top-k list contains item i (perturbed when
    delta=(delta_v, delta_t) is given)."""
    cache = cache if cache is not None else RankCache(params, enc)
    updates = _column_updates(cache, i, delta)
    return int(cache.hit_mask(i, k, updates).sum())


def hit_at_k(params, enc, i, k, delta=None, cache=None):
    """Hit rate as a percentage of all users."""
    cache = cache if cache is not None else RankCache(params, enc)
    n = hit_count(params, enc, i, k, delta=delta, cache=cache)
    return 100.0 * n / enc.table.num_users


def _column_updates(cache, i, delta):
    if delta is None:
        return None
    dv, dt = (np.asarray(d, dtype=np.float64) for d in delta)
    rows, repl = cache.scorer.perturbed_rows(i, dv, dt)
    new_cols = cache.scorer.user_matrix @ repl.T
    return {int(j): new_cols[:, c] for c, j in enumerate(rows)}


def gain_hit(hit_before, hit_after):
    """Relative hit-rate improvement in percent; undefined (NaN) when the
    baseline is zero, so such items drop out of averages."""
    if hit_before == 0:
        return UNDEFINED_GAIN
    return (hit_after - hit_before) / hit_before * 100.0


def recall_ndcg(params, enc, k=10, cache=None):
    """Mean Recall@k and NDCG@k over users with a held-out item.

    The held-out item is ranked among all non-training items; a hit inside
    the top k contributes 1 to recall and 1/log2(rank+1) to NDCG.
    """
    cache = cache if cache is not None else RankCache(params, enc)
    table = enc.table
    eligible = np.nonzero(table.holdout >= 0)[0]
    if eligible.size == 0:
        raise DataError("no user has a held-out item; run the split first")
    sc = cache.masked[eligible]
    hold = table.holdout[eligible]
    target = sc[np.arange(eligible.size), hold]
    ids = np.arange(table.num_items)
    higher = (sc > target[:, None]).sum(axis=1) \
        + ((sc == target[:, None]) & (ids[None, :] < hold[:, None])).sum(axis=1)
    rank = higher  # zero-based count of better items
    inside = rank <= k - 1
    recall = inside.mean()
    ndcg = np.where(inside, 1.0 / np.log2(rank + 2.0), 0.0).mean()
    return float(recall), float(ndcg)


def select_targets(table, count, n_unpop=5, mode="exact", seed=0):
    """Sample target items among the unpopular ones.

    mode "exact" picks items whose interaction count equals n_unpop;
    "at_most" admits any count in [1, n_unpop]. If fewer items qualify than
    requested, all of them are returned.
    """
    if mode not in ("exact", "at_most"):
        raise DataError(f"unknown popularity threshold mode {mode!r}")
    counts = table.item_counts()
    if mode == "exact":
        qualifying = np.nonzero(counts == n_unpop)[0]
    else:
        qualifying = np.nonzero((counts >= 1) & (counts <= n_unpop))[0]
    if qualifying.size == 0:
        raise DataError("no unpopular items qualify")
    rng = np.random.default_rng(seed)
    if qualifying.size <= count:
        return qualifying.copy()
    return np.sort(rng.choice(qualifying, size=count, replace=False))

"""Epsilon-ball propensity estimates over a ball tree, and uniform-treatment
importance weights ``w = 0.5 / p(t | x)``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import get_backend

DEFAULT_CLIP = (0.05, 0.95)


class BallTreeIndex:
    """Binary ball tree over the rows of ``X`` (Euclidean metric).

    Nodes split at the median of the coordinate with the largest spread.
    Node data lives in flat arrays; ``left[i] == -1`` marks a leaf whose
    points are ``idx[start[i]:end[i]]``.
    """

    def __init__(self, X, leaf_size=40):
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] == 0:
            raise ValueError("cannot index an empty point set")
        if not np.all(np.isfinite(X)):
            raise ValueError("coordinates must be finite")
        if leaf_size < 1:
            raise ValueError("leaf_size must be >= 1")
        self.data = X
        self.leaf_size = int(leaf_size)
        self._build()
        # relative slack on the pruning tests so float error in the
        # triangle inequality never changes the answer
        scale = float(np.abs(X).max()) if X.size else 1.0
        self.slack = 1e-9 * (1.0 + scale)

    @property
    def n(self):
        return self.data.shape[0]

    def _build(self):
        X = self.data
        idx = np.arange(X.shape[0], dtype=np.int64)
        start, end, left, right, centers, radii = [], [], [], [], [], []

        def new_node(lo, hi):
            pts = X[idx[lo:hi]]
            c = pts.mean(axis=0)
            r = float(np.sqrt(((pts - c) ** 2).sum(axis=1).max()))
            start.append(lo)
            end.append(hi)
            left.append(-1)
            right.append(-1)
            centers.append(c)
            radii.append(r)
            return len(start) - 1

        todo = [new_node(0, X.shape[0])]
        while todo:
            node = todo.pop()
            lo, hi = start[node], end[node]
            if hi - lo <= self.leaf_size or radii[node] == 0.0:
                continue
            pts = X[idx[lo:hi]]
            dim = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
            mid = (hi - lo) // 2
            order = np.argpartition(pts[:, dim], mid, kind="introselect")
            idx[lo:hi] = idx[lo:hi][order]
            a = new_node(lo, lo + mid)
            b = new_node(lo + mid, hi)
            left[node], right[node] = a, b
            todo.extend((b, a))

        self.idx = idx
        self.start = np.asarray(start, dtype=np.int64)
        self.end = np.asarray(end, dtype=np.int64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.center = np.ascontiguousarray(centers, dtype=np.float64).reshape(len(start), X.shape[1])
        self.radius = np.asarray(radii, dtype=np.float64)

    @property
    def n_nodes(self):
        return len(self.radius)

    def leaves(self):
        return [self.idx[s:e] for s, e, l in zip(self.start, self.end, self.left) if l < 0]

    def _arrays(self):
        return (self.data, self.idx, self.start, self.end, self.center, self.radius, self.left, self.right)

    def query_radius(self, q, epsilon, backend=None):
        """Sorted indices of indexed points with distance <= epsilon."""
        _check_eps(epsilon)
        q = np.ascontiguousarray(np.atleast_1d(q), dtype=np.float64).reshape(-1)
        if q.shape[0] != self.data.shape[1]:
            raise ValueError(f"query has dim {q.shape[0]}, index has {self.data.shape[1]}")
        kern = get_backend(backend)
        return kern.query_radius(*self._arrays(), q, float(epsilon), self.slack)

    def radius_count(self, queries, labels, epsilon, backend=None):
        """(treated, total) counts of labelled neighbours within epsilon, per query row.

        A query equal to an indexed point counts that point itself.
        """
        _check_eps(epsilon)
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        if labels.shape != (self.n,):
            raise ValueError("labels must align with the indexed points")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be 0 or 1")
        queries = np.ascontiguousarray(queries, dtype=np.float64)
        if queries.ndim == 1:
            queries = queries.reshape(-1, self.data.shape[1])
        if queries.shape[1] != self.data.shape[1]:
            raise ValueError("query dimension does not match the index")
        prefix = np.concatenate([[0], np.cumsum(labels[self.idx])])
        node_treated = (prefix[self.end] - prefix[self.start]).astype(np.int64)
        kern = get_backend(backend)
        return kern.radius_count(*self._arrays(), node_treated, labels, queries, float(epsilon), self.slack)


def build_index(X, leaf_size=40):
    return BallTreeIndex(X, leaf_size=leaf_size)


def radius_count(index, x, labels, epsilon, backend=None):
    """Counts for a single point ``x``: ``(treated, total)``."""
    t, n = index.radius_count(np.atleast_2d(np.asarray(x, dtype=np.float64)), labels, epsilon, backend)
    return int(t[0]), int(n[0])


def _check_eps(epsilon):
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")


@dataclass
class PropensityEstimate:
    e: np.ndarray
    epsilon: float
    smoothing: float
    clip_lo: float
    clip_hi: float
    treated_counts: np.ndarray
    total_counts: np.ndarray

    @property
    def raw_counts(self):
        return np.stack([self.treated_counts, self.total_counts], axis=1)


def smoothed_propensity(treated, total, smoothing=1.0, clip_lo=DEFAULT_CLIP[0], clip_hi=DEFAULT_CLIP[1]):
    _check_clips(clip_lo, clip_hi)
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    treated = np.asarray(treated, dtype=np.float64)
    total = np.asarray(total, dtype=np.float64)
    denom = total + 2.0 * smoothing
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = np.where(denom > 0, (treated + smoothing) / np.where(denom > 0, denom, 1.0), 0.5)
    return np.clip(raw, clip_lo, clip_hi)


def _check_clips(lo, hi):
    if not (0.0 < lo < hi < 1.0):
        raise ValueError(f"need 0 < clip_lo < clip_hi < 1, got ({lo}, {hi})")


def estimate_propensity(index, labels, epsilon, smoothing=1.0, clip_lo=DEFAULT_CLIP[0],
                        clip_hi=DEFAULT_CLIP[1], queries=None, backend=None):
    """Smoothed, clipped fraction of treated points in each epsilon-ball.

    ``queries`` defaults to the indexed points themselves.
    """
    _check_clips(clip_lo, clip_hi)
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    q = index.data if queries is None else queries
    treated, total = index.radius_count(q, labels, epsilon, backend=backend)
    e = smoothed_propensity(treated, total, smoothing, clip_lo, clip_hi)
    return PropensityEstimate(e, float(epsilon), float(smoothing), clip_lo, clip_hi, treated, total)


@dataclass
class ImportanceWeights:
    w: np.ndarray
    target: float = 0.5

    def __len__(self):
        return len(self.w)

    def subset(self, rows):
        return ImportanceWeights(self.w[rows], self.target)


def weights_from_propensity(e, t, target=0.5):
    e = np.asarray(e, dtype=np.float64)
    t = np.asarray(t).reshape(-1)
    if e.shape != t.shape:
        raise ValueError("propensities and treatments are misaligned")
    p_t = np.where(t == 1, e, 1.0 - e)
    return ImportanceWeights(target / p_t, target)


def importance_weights(est, t):
    """``w_i = 0.5 / e_i`` for treated rows, ``0.5 / (1 - e_i)`` for controls."""
    return weights_from_propensity(est.e, t)


def unit_weights(n):
    return ImportanceWeights(np.ones(n))

"""Canonical KD-tree with exact NN / kNN / radius search and visit accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import _kernels as K
from ._validation import check_points, check_query

__all__ = [
    "SearchStats",
    "EmptyTreeError",
    "KDTree",
    "NeighborResult",
    "RadiusResult",
    "build",
    "nn_search",
    "knn_search",
    "radius_search",
    "brute_force_nn",
    "brute_force_knn",
    "brute_force_radius",
    "save_node_table",
    "load_node_table",
    "NODE_DTYPE",
]


class EmptyTreeError(ValueError):
    """Search on a tree (or oracle) built from zero points."""


@dataclass(frozen=True)
class SearchStats:
    """Search cost counters.

    ``nodes_visited`` counts every stored point a query was compared against:
    top-tree nodes, leaf-set members, leaders and follower candidates.
    """

    nodes_visited: int = 0
    distance_computations: int = 0
    nodes_pruned: int = 0
    top_nodes_visited: int = 0
    leaf_sets_scanned: int = 0
    leaf_points_scanned: int = 0
    leader_comparisons: int = 0
    follower_candidates: int = 0

    @classmethod
    def from_array(cls, stats: np.ndarray) -> "SearchStats":
        """Sum a ``(n_queries, 8)`` kernel stats array (or one row)."""
        stats = np.asarray(stats, dtype=np.int64)
        if stats.ndim == 2:
            stats = stats.sum(axis=0)
        return cls(*(int(v) for v in stats))

    def __add__(self, other: "SearchStats") -> "SearchStats":
        return SearchStats(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True, eq=False)
class NeighborResult:
    """Batch k-NN output. Row ``i`` holds query ``i``'s neighbours, nearest first."""

    indices: np.ndarray
    distances: np.ndarray
    stats: np.ndarray
    approximated: np.ndarray
    events: np.ndarray

    @property
    def total(self) -> SearchStats:
        return SearchStats.from_array(self.stats)

    def query_stats(self, i: int) -> SearchStats:
        return SearchStats.from_array(self.stats[i])


@dataclass(frozen=True, eq=False)
class RadiusResult:
    """Batch radius-search output in CSR form; each query's hits are sorted by index."""

    offsets: np.ndarray
    indices: np.ndarray
    distances: np.ndarray
    stats: np.ndarray
    approximated: np.ndarray
    events: np.ndarray

    def __len__(self):
        return len(self.offsets) - 1

    def __getitem__(self, i):
        a, b = self.offsets[i], self.offsets[i + 1]
        return self.indices[a:b], self.distances[a:b]

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def total(self) -> SearchStats:
        return SearchStats.from_array(self.stats)

    def query_stats(self, i: int) -> SearchStats:
        return SearchStats.from_array(self.stats[i])


class KDTree(BaseEstimator):
    """Balanced median-split KD-tree storing one point per node.

    The split axis cycles with depth; the node point is the element at
    ``floor(k / 2)`` of its range ordered by (coordinate, point index). Nodes
    are stored in preorder so every subtree is a contiguous id range.

    Parameters
    ----------
    prune : bool
        Skip subtrees whose bounding box is farther than the current bound.
        Turning it off visits every node and never changes results.
    """

    def __init__(self, prune: bool = True):
        self.prune = prune

    # the canonical tree never reaches a leaf-set depth
    _h_top_value = -1

    def fit(self, X, y=None):
        X = check_points(X)
        self.data_ = X
        self.n_samples_, self.n_features_in_ = X.shape
        (self.perm_, self.axis_, self.left_, self.right_, self.size_, self.depth_,
         self.heap_, self.lo_, self.hi_) = K.build_tree(X)
        self.n_levels_ = int(self.depth_.max()) + 1 if self.n_samples_ else 0
        self._bucket_of = np.full(max(self.n_samples_, 1), -1, np.int64)
        self._n_buckets = 0
        return self

    @property
    def height(self) -> int:
        return self.n_levels_

    def _check(self, X):
        check_is_fitted(self, "data_")
        if self.n_samples_ == 0:
            raise EmptyTreeError("search on an empty tree")
        return check_query(X, self.n_features_in_)

    def _args(self):
        return (self.data_, self.perm_, self.axis_, self.left_, self.right_, self.size_,
                self.depth_, self.heap_, self.lo_, self.hi_)

    def _knn(self, Q, k, thd=0.0, cap=1, trace=False) -> NeighborResult:
        if k < 1:
            raise ValueError("k must be >= 1")
        out = K.knn_batch(*self._args(), Q, int(k), self._h_top_value, self._bucket_of,
                          self._n_buckets, float(thd), int(cap), bool(trace), bool(self.prune))
        return NeighborResult(*out)

    def _radius(self, Q, r, thd=0.0, cap=1, trace=False) -> RadiusResult:
        if not r >= 0:
            raise ValueError("radius must be >= 0")
        out = K.radius_batch(*self._args(), Q, float(r), self._h_top_value, self._bucket_of,
                             self._n_buckets, float(thd), int(cap), bool(trace), bool(self.prune))
        return RadiusResult(*out)

    # batch API ---------------------------------------------------------------

    def query(self, X, k: int = 1) -> NeighborResult:
        """k nearest neighbours of every row of ``X`` (``k > n`` returns all n)."""
        Q = self._check(X)
        k_eff = min(int(k), self.n_samples_)
        if k < 1:
            raise ValueError("k must be >= 1")
        return self._knn(Q, k_eff)

    def query_radius(self, X, r: float) -> RadiusResult:
        Q = self._check(X)
        return self._radius(Q, r)

    # single-query API -------------------------------------------------------

    def nn_search(self, q):
        res = self.query(q, 1)
        return int(res.indices[0, 0]), float(res.distances[0, 0]), res.query_stats(0)

    def knn_search(self, q, k: int):
        res = self.query(q, k)
        return list(zip(res.indices[0].tolist(), res.distances[0].tolist()))

    def kth_nn_search(self, q, k: int):
        """The k-th nearest neighbour (1-based), as ``(index, distance)``."""
        check_is_fitted(self, "data_")
        if k < 1 or k > self.n_samples_:
            raise ValueError(f"k={k} outside [1, {self.n_samples_}]")
        res = self.query(q, k)
        return int(res.indices[0, k - 1]), float(res.distances[0, k - 1])

    def radius_search(self, q, r: float):
        res = self.query_radius(q, r)
        idx, dist = res[0]
        return list(zip(idx.tolist(), dist.tolist())), res.query_stats(0)

    def ring_radius_search(self, q, r1: float, r2: float):
        """Points with ``r1 <= distance <= r2``."""
        if not (0 <= r1 < r2):
            raise ValueError("ring radii must satisfy 0 <= r1 < r2")
        hits, _ = self.radius_search(q, r2)
        return [(i, d) for i, d in hits if d >= r1]


def build(cloud, prune: bool = True) -> KDTree:
    return KDTree(prune=prune).fit(cloud)


def nn_search(tree: KDTree, q):
    return tree.nn_search(q)


def knn_search(tree: KDTree, q, k: int):
    return tree.knn_search(q, k)


def radius_search(tree: KDTree, q, r: float):
    return tree.radius_search(q, r)


# oracles ---------------------------------------------------------------------


def _scan(points, q):
    P = check_points(points)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    return P, np.sqrt(((P - q) ** 2).sum(axis=1))


def brute_force_nn(points, q):
    """Exhaustive nearest neighbour; equal distances go to the lowest index."""
    P, d = _scan(points, q)
    if len(P) == 0:
        raise EmptyTreeError("nearest neighbour of an empty cloud")
    i = int(np.argmin(d))
    return i, float(d[i])


def brute_force_knn(points, q, k: int):
    P, d = _scan(points, q)
    order = np.lexsort((np.arange(len(d)), d))[:k]
    return [(int(i), float(d[i])) for i in order]


def brute_force_radius(points, q, r: float):
    if r < 0:
        raise ValueError("radius must be >= 0")
    _, d = _scan(points, q)
    idx = np.flatnonzero(d <= r)
    return [(int(i), float(d[i])) for i in idx]


# flat node table ---------------------------------------------------------------

NODE_DTYPE = np.dtype([("point", "<i4"), ("axis", "u1"), ("left", "<i4"), ("right", "<i4")])


def save_node_table(tree: KDTree, path) -> None:
    """Write fixed-size little-endian node records (point, axis, left, right)."""
    check_is_fitted(tree, "data_")
    rec = np.empty(tree.n_samples_, NODE_DTYPE)
    rec["point"] = tree.perm_
    rec["axis"] = tree.axis_
    rec["left"] = tree.left_
    rec["right"] = tree.right_
    rec.tofile(path)


def load_node_table(path) -> np.ndarray:
    return np.fromfile(path, dtype=NODE_DTYPE)


def depth_bound(n: int) -> int:
    return math.ceil(math.log2(n)) + 1 if n > 0 else 0

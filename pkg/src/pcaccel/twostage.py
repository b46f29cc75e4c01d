"""Two-stage KD-tree, leader/follower approximate search and redundancy sweeps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from sklearn.utils.validation import check_is_fitted

from .kdtree import KDTree, NeighborResult, RadiusResult, SearchStats
from ._validation import check_points

__all__ = [
    "ApproxConfig",
    "TwoStageKDTree",
    "build_two_stage",
    "nn_search_2s",
    "radius_search_2s",
    "approx_batch_search",
    "kth_nn_search",
    "ring_radius_search",
    "redundancy_report",
    "h_top_for_leaf_size",
    "save_results_csv",
]


@dataclass(frozen=True)
class ApproxConfig:
    """Leader/follower knobs.

    A query whose closest leader in a leaf is nearer than the threshold
    searches only that leader's result. The radius-mode threshold is
    ``radius_threshold_fraction * r``.
    """

    nn_threshold: float = 1.2
    radius_threshold_fraction: float = 0.4
    leader_cap: int = 16

    def __post_init__(self):
        if self.nn_threshold < 0:
            raise ValueError("nn_threshold must be >= 0")
        if not 0.0 <= self.radius_threshold_fraction <= 1.0:
            raise ValueError("radius_threshold_fraction must be in [0, 1]")
        if self.leader_cap < 1:
            raise ValueError("leader_cap must be >= 1")


class TwoStageKDTree(KDTree):
    """KD-tree truncated at height ``h_top`` whose leaves hold unordered point sets.

    The top-tree is exactly the first ``h_top`` levels of the canonical tree
    over the same points. Every node at depth ``h_top`` becomes a leaf whose
    set is the whole canonical subtree below it; searches scan it
    exhaustively. ``h_top=0`` is a single set holding every point.

    Parameters
    ----------
    h_top : int, optional
        Top-tree height. Exactly one of ``h_top`` / ``leaf_size`` is used;
        ``leaf_size`` picks the smallest height whose largest leaf set has at
        most that many points.
    leaf_size : int, optional
    prune : bool
    """

    def __init__(self, h_top=None, leaf_size=None, prune: bool = True):
        self.h_top = h_top
        self.leaf_size = leaf_size
        self.prune = prune

    def fit(self, X, y=None):
        super().fit(X)
        if self.h_top is not None:
            if self.h_top < 0:
                raise ValueError("h_top must be >= 0")
            h = int(self.h_top)
        elif self.leaf_size is not None:
            h = h_top_for_leaf_size(self, self.leaf_size)
        else:
            h = max(0, self.n_levels_ - 1 - int(round(math.log2(128))))
        self.h_top_ = h
        self._h_top_value = h
        buckets = np.flatnonzero(self.depth_ == h) if self.n_samples_ else np.zeros(0, np.int64)
        # leaf id order = heap position at depth h
        buckets = buckets[np.argsort(self.heap_[buckets], kind="stable")]
        self.bucket_nodes_ = buckets
        self.leaf_ids_ = self.heap_[buckets] - (1 << h)
        bucket_of = np.full(max(self.n_samples_, 1), -1, np.int64)
        bucket_of[buckets] = np.arange(len(buckets))
        self._bucket_of = bucket_of
        self._n_buckets = len(buckets)
        return self

    @property
    def leaf_sets_(self):
        check_is_fitted(self, "h_top_")
        return [self.perm_[b:b + self.size_[b]] for b in self.bucket_nodes_]

    @property
    def leaf_set_sizes_(self) -> np.ndarray:
        check_is_fitted(self, "h_top_")
        return self.size_[self.bucket_nodes_]

    @property
    def top_interior_nodes_(self) -> np.ndarray:
        return np.flatnonzero(self.depth_ < self.h_top_)

    def approx_query(self, X, cfg: ApproxConfig = ApproxConfig(), mode: str = "nn",
                     r: float | None = None, record_trace: bool = False):
        """Leader/follower search over ``X`` processed in row order."""
        Q = self._check(X)
        if mode == "nn":
            return self._knn(Q, 1, cfg.nn_threshold, cfg.leader_cap, record_trace)
        if mode == "radius":
            if r is None:
                raise ValueError("radius mode needs r")
            return self._radius(Q, r, cfg.radius_threshold_fraction * r, cfg.leader_cap, record_trace)
        raise ValueError(f"unknown mode {mode!r}")

    def traced_query(self, X, mode: str = "nn", r: float | None = None):
        """Exact search that also records the per-query traversal events."""
        Q = self._check(X)
        if mode == "nn":
            return self._knn(Q, 1, trace=True)
        return self._radius(Q, r, trace=True)


def h_top_for_leaf_size(tree: KDTree, leaf_size: int) -> int:
    """Smallest top-tree height whose largest leaf set has ``<= leaf_size`` points."""
    if leaf_size < 1:
        raise ValueError("leaf_size must be >= 1")
    for h in range(tree.n_levels_ + 1):
        at = tree.size_[tree.depth_ == h]
        if len(at) == 0 or at.max() <= leaf_size:
            return h
    return tree.n_levels_


def build_two_stage(cloud, h_top: int) -> TwoStageKDTree:
    return TwoStageKDTree(h_top=h_top).fit(cloud)


def nn_search_2s(tree: TwoStageKDTree, q):
    return tree.nn_search(q)


def radius_search_2s(tree: TwoStageKDTree, q, r: float):
    return tree.radius_search(q, r)


def kth_nn_search(tree: KDTree, q, k: int):
    return tree.kth_nn_search(q, k)


def ring_radius_search(tree: KDTree, q, r1: float, r2: float):
    return tree.ring_radius_search(q, r1, r2)


def approx_batch_search(tree: TwoStageKDTree, queries, mode: str = "nn", cfg: ApproxConfig = ApproxConfig(),
                        r: float | None = None, record_trace: bool = False):
    return tree.approx_query(queries, cfg, mode, r, record_trace)


def redundancy_report(cloud, queries, leaf_set_sizes, radius: float = 0.6):
    """Visit ratio of two-stage over canonical search per leaf-set size.

    Ratios are total (equivalently mean) two-stage visits over total canonical
    visits across ``queries``.
    """
    P = check_points(cloud)
    Q = check_points(queries, dim=P.shape[1])
    canon = KDTree().fit(P)
    base_nn = canon.query(Q, 1).total.nodes_visited
    base_r = canon.query_radius(Q, radius).total.nodes_visited
    rows = []
    for s in leaf_set_sizes:
        if s < 1:
            raise ValueError("leaf-set sizes must be >= 1")
        t = TwoStageKDTree(leaf_size=int(s)).fit(P)
        nn = t.query(Q, 1).total.nodes_visited
        rad = t.query_radius(Q, radius).total.nodes_visited
        rows.append({
            "leaf_set_size": int(s),
            "h_top": t.h_top_,
            "max_leaf_set": int(t.leaf_set_sizes_.max()) if t._n_buckets else 0,
            "nn_ratio": nn / base_nn,
            "radius_ratio": rad / base_r,
            "nn_visits_per_query": nn / len(Q),
            "radius_visits_per_query": rad / len(Q),
            "canonical_nn_visits_per_query": base_nn / len(Q),
            "canonical_radius_visits_per_query": base_r / len(Q),
        })
    return rows


def save_results_csv(result, path) -> None:
    """Write per-query results as ``query,rank,index,distance`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query", "rank", "index", "distance"])
        if isinstance(result, NeighborResult):
            for qi in range(result.indices.shape[0]):
                for j, (i, d) in enumerate(zip(result.indices[qi], result.distances[qi])):
                    if i >= 0:
                        w.writerow([qi, j, int(i), repr(float(d))])
        elif isinstance(result, RadiusResult):
            for qi in range(len(result)):
                idx, dist = result[qi]
                for j, (i, d) in enumerate(zip(idx, dist)):
                    w.writerow([qi, j, int(i), repr(float(d))])
        else:
            raise TypeError("expected NeighborResult or RadiusResult")


def total_stats(result) -> SearchStats:
    return result.total

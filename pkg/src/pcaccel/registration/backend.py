"""Search backends for the pipeline: tree flavour, approximation, error injection
and KD-tree time accounting."""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from ..kdtree import KDTree, SearchStats
from ..twostage import ApproxConfig, TwoStageKDTree

BACKEND_KINDS = ("canonical", "two-stage", "approx")
STAGES = ("ne", "keypoints", "descriptors", "kpce", "rejection", "rpce", "transform")
# dense 3-D searches that the approximate backend may relax
APPROX_STAGES = ("ne", "rpce")


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "canonical"
    h_top: int | None = None
    leaf_size: int | None = None
    approx: ApproxConfig = field(default_factory=ApproxConfig)

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"backend kind must be one of {BACKEND_KINDS}")


@dataclass(frozen=True)
class ErrorInjection:
    """Replace exact answers in one stage.

    ``k``: NN searches return the k-th nearest neighbour. ``ring``: radius
    searches return points with ``r1 <= d <= r2`` instead of ``d <= r``.
    """

    stage: str
    k: int | None = None
    ring: tuple | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if (self.k is None) == (self.ring is None):
            raise ValueError("exactly one of k / ring must be given")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.ring is not None:
            r1, r2 = self.ring
            if not 0 <= r1 < r2:
                raise ValueError("ring must satisfy 0 <= r1 < r2")

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorInjection":
        ring = d.get("ring")
        return cls(d["stage"], d.get("k"), tuple(ring) if ring is not None else None)

    def to_dict(self) -> dict:
        return {"stage": self.stage, "k": self.k, "ring": list(self.ring) if self.ring else None}


class KdClock:
    """Accumulates wall time spent inside KD-tree searches (and, separately,
    tree construction) per stage."""

    def __init__(self):
        self.seconds = defaultdict(float)
        self.build_seconds = defaultdict(float)
        self.stats = defaultdict(SearchStats)

    def run(self, stage, fn, *args, build=False):
        t0 = time.perf_counter()
        out = fn(*args)
        (self.build_seconds if build else self.seconds)[stage] += time.perf_counter() - t0
        return out


class SearchBackend:
    def __init__(self, cfg: BackendConfig = BackendConfig(), injections=(), clock: KdClock | None = None,
                 record_traces: bool = False):
        self.cfg = cfg
        self.injections = {inj.stage: inj for inj in injections}
        self.clock = clock or KdClock()
        self.record_traces = record_traces
        # stage -> list of (tree, result) for 3-d two-stage searches
        self.traces = defaultdict(list)

    def index(self, points, stage: str) -> "SearchIndex":
        return SearchIndex(self, np.ascontiguousarray(points, dtype=np.float64), stage)

    def _make_tree(self, points):
        if self.cfg.kind == "canonical" or points.shape[1] != 3:
            # feature-space search is always exact on the canonical tree
            return KDTree()
        return TwoStageKDTree(h_top=self.cfg.h_top, leaf_size=self.cfg.leaf_size)


class SearchIndex:
    """A tree over one point set, answering searches on behalf of pipeline stages."""

    def __init__(self, backend: SearchBackend, points: np.ndarray, stage: str):
        self.backend = backend
        self.points = points
        self.tree = backend.clock.run(stage, backend._make_tree(points).fit, points, build=True)
        self._trace = backend.record_traces and isinstance(self.tree, TwoStageKDTree)

    def _approx_for(self, stage):
        b = self.backend
        return (b.cfg.kind == "approx" and stage in APPROX_STAGES and stage not in b.injections
                and isinstance(self.tree, TwoStageKDTree))

    def _record(self, stage, res):
        self.backend.clock.stats[stage] = self.backend.clock.stats[stage] + res.total
        if self._trace:
            self.backend.traces[stage].append((self.tree, res))

    def _knn(self, Q, k):
        return self.tree._knn(self.tree._check(Q), k, trace=self._trace)

    def _radius(self, Q, r):
        return self.tree._radius(self.tree._check(Q), r, trace=self._trace)

    def nn(self, queries, stage: str):
        """Nearest neighbour (index, distance) per query row."""
        queries = np.ascontiguousarray(queries, dtype=np.float64)
        clock = self.backend.clock
        inj = self.backend.injections.get(stage)
        if self._approx_for(stage):
            res = clock.run(stage, self.tree.approx_query, queries, self.backend.cfg.approx, "nn",
                            None, self._trace)
            self._record(stage, res)
            return res.indices[:, 0], res.distances[:, 0]
        k = inj.k if inj is not None and inj.k is not None else 1
        k = min(k, len(self.points))
        res = clock.run(stage, self._knn, queries, k)
        self._record(stage, res)
        return res.indices[:, k - 1], res.distances[:, k - 1]

    def knn(self, queries, k: int, stage: str):
        queries = np.ascontiguousarray(queries, dtype=np.float64)
        res = self.backend.clock.run(stage, self._knn, queries, min(k, len(self.points)))
        self._record(stage, res)
        return res.indices, res.distances

    def radius(self, queries, r: float, stage: str):
        """CSR radius result; subject to approximation / ring injection for ``stage``."""
        queries = np.ascontiguousarray(queries, dtype=np.float64)
        clock = self.backend.clock
        inj = self.backend.injections.get(stage)
        if self._approx_for(stage):
            res = clock.run(stage, self.tree.approx_query, queries, self.backend.cfg.approx, "radius",
                            r, self._trace)
            self._record(stage, res)
            return res.offsets, res.indices, res.distances
        if inj is not None and inj.ring is not None:
            r1, r2 = inj.ring
            res = clock.run(stage, self._radius, queries, r2)
            self._record(stage, res)
            keep = res.distances >= r1
            qid = np.repeat(np.arange(len(queries)), res.counts)
            counts = np.bincount(qid[keep], minlength=len(queries))
            offs = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
            return offs, res.indices[keep], res.distances[keep]
        res = clock.run(stage, self._radius, queries, r)
        self._record(stage, res)
        return res.offsets, res.indices, res.distances

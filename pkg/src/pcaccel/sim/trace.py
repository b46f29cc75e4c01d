"""Query traces: the per-query top-tree walk that drives the simulator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import _kernels as K
from ..kdtree import NeighborResult, RadiusResult

VISIT, PRUNE, LEAF = K.VISIT, K.PRUNE, K.LEAF
EXACT, LEADER, FOLLOWER = K.MODE_EXACT, K.MODE_LEADER, K.MODE_FOLLOWER
COLUMNS = ("query", "kind", "node", "leaf", "m", "mode", "L", "R", "push")


class TraceError(ValueError):
    """A trace is malformed or does not match its tree."""


@dataclass(frozen=True, eq=False)
class QueryTrace:
    """Ordered traversal events of a query batch over a two-stage tree.

    ``events`` has one row per popped node with columns ``COLUMNS``: kind is
    VISIT (top-tree node compared and expanded), PRUNE or LEAF (leaf set
    handed to the back-end); ``m`` is the leaf-set size, ``mode`` is
    exact/leader/follower, ``L`` leaders compared, ``R`` result points and
    ``push`` the children pushed. ``leaf_sizes`` is indexed by leaf id.
    """

    h_top: int
    n_queries: int
    events: np.ndarray
    leaf_sizes: np.ndarray
    result_sizes: np.ndarray

    def __post_init__(self):
        ev = np.ascontiguousarray(self.events, dtype=np.int64).reshape(-1, len(COLUMNS))
        object.__setattr__(self, "events", ev)
        object.__setattr__(self, "leaf_sizes", np.asarray(self.leaf_sizes, dtype=np.int64))
        object.__setattr__(self, "result_sizes", np.asarray(self.result_sizes, dtype=np.int64))

    def col(self, name: str) -> np.ndarray:
        return self.events[:, COLUMNS.index(name)]

    @property
    def has_approx(self) -> bool:
        return bool(np.any(self.col("mode") != EXACT))

    def validate(self) -> None:
        ev = self.events
        if not 0 <= self.h_top <= 30:
            raise TraceError("h_top must be in [0, 30]")
        if len(self.leaf_sizes) != 1 << self.h_top:
            raise TraceError("leaf_sizes must have 2**h_top entries")
        if len(self.result_sizes) != self.n_queries:
            raise TraceError("result_sizes must have one entry per query")
        if len(ev) == 0:
            return
        q, kind, leaf, m, mode = (self.col(c) for c in ("query", "kind", "leaf", "m", "mode"))
        if q.min() < 0 or q.max() >= self.n_queries or np.any(np.diff(q) < 0):
            raise TraceError("event query ids must be sorted and within range")
        if not np.isin(kind, (VISIT, PRUNE, LEAF)).all() or not np.isin(mode, (EXACT, LEADER, FOLLOWER)).all():
            raise TraceError("unknown event kind or mode")
        lf = kind == LEAF
        if np.any(leaf[lf] < 0) or np.any(leaf[lf] >= 1 << self.h_top):
            raise TraceError("leaf ids must lie in [0, 2**h_top)")
        if np.any(self.leaf_sizes[leaf[lf]] != m[lf]):
            raise TraceError("leaf-set sizes disagree with the leaf table")
        if np.any(mode[~lf] != EXACT) or np.any(self.col("push")[lf] != 0):
            raise TraceError("only leaf events carry a mode; leaf events push nothing")
        if np.any(self.events[:, 6:] < 0):
            raise TraceError("counts must be non-negative")

    def validate_against(self, tree) -> None:
        """Check every event's node against ``tree`` (a fitted TwoStageKDTree)."""
        self.validate()
        if getattr(tree, "h_top_", None) != self.h_top:
            raise TraceError("trace h_top differs from the tree's")
        node, kind, leaf = self.col("node"), self.col("kind"), self.col("leaf")
        if len(node) and (node.min() < 0 or node.max() >= tree.n_samples_):
            raise TraceError("node id outside the tree")
        d = tree.depth_[node]
        lf = kind == LEAF
        if np.any(d[lf] != self.h_top) or np.any(d[kind == VISIT] >= self.h_top):
            raise TraceError("event depths disagree with the tree")
        if np.any(tree.heap_[node[lf]] - (1 << self.h_top) != leaf[lf]):
            raise TraceError("leaf ids disagree with the tree")

    # construction ------------------------------------------------------------

    @classmethod
    def from_result(cls, tree, result) -> "QueryTrace":
        """Trace from a two-stage search run with ``record_trace=True``."""
        if getattr(tree, "h_top_", None) is None:
            raise TraceError("traces need a fitted TwoStageKDTree")
        raw = np.asarray(result.events, dtype=np.int64).reshape(-1, K.EV_COLS)
        if isinstance(result, NeighborResult):
            nq = result.indices.shape[0]
            res_sizes = (result.indices >= 0).sum(axis=1)
        elif isinstance(result, RadiusResult):
            nq = len(result)
            res_sizes = result.counts
        else:
            raise TypeError("expected a NeighborResult or RadiusResult")
        if nq and len(raw) == 0:
            raise TraceError("result carries no events; search with record_trace=True")
        node = raw[:, 2]
        push = np.where(raw[:, 1] == VISIT,
                        (tree.left_[node] >= 0).astype(np.int64) + (tree.right_[node] >= 0), 0)
        ev = np.column_stack([raw, push])
        h = tree.h_top_
        sizes = np.zeros(1 << h, np.int64)
        sizes[tree.leaf_ids_] = tree.leaf_set_sizes_
        return cls(h, nq, ev, sizes, res_sizes)

    @classmethod
    def concatenate(cls, traces) -> "QueryTrace":
        traces = list(traces)
        if not traces:
            raise TraceError("nothing to concatenate")
        h = traces[0].h_top
        if any(t.h_top != h or not np.array_equal(t.leaf_sizes, traces[0].leaf_sizes) for t in traces):
            raise TraceError("traces come from different trees")
        parts, off = [], 0
        for t in traces:
            e = t.events.copy()
            e[:, 0] += off
            parts.append(e)
            off += t.n_queries
        return cls(h, off, np.concatenate(parts), traces[0].leaf_sizes,
                   np.concatenate([t.result_sizes for t in traces]))

    # I/O ---------------------------------------------------------------------

    def save(self, path) -> None:
        """Binary form (numpy ``.npz``)."""
        with open(path, "wb") as fh:
            np.savez(fh, h_top=self.h_top, n_queries=self.n_queries, events=self.events,
                     leaf_sizes=self.leaf_sizes, result_sizes=self.result_sizes)

    @classmethod
    def load(cls, path) -> "QueryTrace":
        with np.load(path) as z:
            t = cls(int(z["h_top"]), int(z["n_queries"]), z["events"], z["leaf_sizes"], z["result_sizes"])
        t.validate()
        return t

    def to_csv(self, path) -> None:
        """CSV with ``#`` header lines carrying h_top, leaf sizes and result sizes."""
        with open(path, "w") as fh:
            fh.write(f"# h_top={self.h_top}\n# n_queries={self.n_queries}\n")
            fh.write("# leaf_sizes=" + " ".join(map(str, self.leaf_sizes.tolist())) + "\n")
            fh.write("# result_sizes=" + " ".join(map(str, self.result_sizes.tolist())) + "\n")
            fh.write(",".join(COLUMNS) + "\n")
            np.savetxt(fh, self.events, fmt="%d", delimiter=",")

    @classmethod
    def from_csv(cls, path) -> "QueryTrace":
        meta = {}
        with open(path) as fh:
            for line in fh:
                if not line.startswith("#"):
                    if line.strip() != ",".join(COLUMNS):
                        raise TraceError("bad trace CSV header")
                    break
                k, _, v = line[1:].strip().partition("=")
                meta[k] = v
            try:
                ev = np.loadtxt(fh, dtype=np.int64, delimiter=",", ndmin=2)
                t = cls(int(meta["h_top"]), int(meta["n_queries"]), ev,
                        np.array(meta["leaf_sizes"].split(), dtype=np.int64),
                        np.array(meta["result_sizes"].split(), dtype=np.int64))
            except (KeyError, ValueError) as exc:
                raise TraceError(f"bad trace CSV: {exc}") from exc
        t.validate()
        return t


def trace_search(tree, queries, mode: str = "nn", r: float | None = None, approx=None) -> QueryTrace:
    """Run an exact (or, with ``approx``, leader/follower) search and return its trace."""
    if approx is not None:
        res = tree.approx_query(queries, approx, mode, r, record_trace=True)
    else:
        res = tree.traced_query(queries, mode, r)
    return QueryTrace.from_result(tree, res)

"""Event-driven cycle model of the front-end recursion units and back-end search units.

Front-end. A query is walked by one recursion unit (RU) through the six
stages FQ, RS, RN, CD, PI, CL. FQ fetches the query once per trip through
the front-end. Each popped node then takes RS (read stack top), RN (read
node), CD (distance) and PI (push children); a leaf set additionally takes
CL and leaves for the back-end. The next node's RS depends on the previous
node's stack update:

* expanded node: the next RS waits for PI (3 bubbles) unless forwarding
  hands the later-pushed child straight to RS (no bubble);
* pruned node: the prune decision is known after RN. With bypassing the node
  exits there and the next RS issues one cycle later; without it the node
  occupies CD and PI as well (3 bubbles).

A trip ending at a leaf costs ``1 + sum(D) + 5``; the RU is busy for the
whole trip and the query re-enters the front-end queue once the back-end
returns it.

Back-end. Leaf requests go to search unit ``leaf_id mod num_su`` through a
fixed-latency distribution network into that unit's query buffer (BQB). A
full BQB stalls the sending RU. MQSN issues batches of up to
``pes_per_su`` same-leaf queries found by associative search (cost
``ceil(occupancy / 32)`` cycles, overlapped with the previous batch); the
leaf set streams once through the PE chain. MQMN lets each PE take the next
query and stream its own leaf set.
"""

from __future__ import annotations

import heapq
import math
from collections import OrderedDict, deque

import numpy as np

from .config import SimConfig, SimStats
from .trace import EXACT, FOLLOWER, LEADER, LEAF, PRUNE, VISIT, QueryTrace, TraceError

STAGES = ("FQ", "RS", "RN", "CD", "PI", "CL")
ASSOC_WIDTH = 32


class SimulationError(RuntimeError):
    """The modelled hardware cannot run the trace (e.g. stack overflow)."""


def node_spacing(kind: int, forwarding: bool, bypassing: bool) -> int:
    """Cycles from this node's RS to the next node's RS."""
    if kind == PRUNE:
        return 2 if bypassing else 4
    return 1 if forwarding else 4


def node_tail(kind: int, bypassing: bool) -> int:
    """Cycles from the last node's RS to the end of the trip."""
    if kind == LEAF:
        return 5
    if kind == PRUNE:
        return 2 if bypassing else 4
    return 4


def ru_schedule(kinds, forwarding: bool = True, bypassing: bool = True):
    """Per-node schedule of one trip: list of ``(kind, {stage: cycle})`` and total cycles.

    Cycle 0 is FQ. A node that is pruned under bypassing stops after RN.
    """
    kinds = list(kinds)
    if not kinds:
        return [], 0
    sched = []
    t = 1
    for i, k in enumerate(kinds):
        if k == PRUNE and bypassing:
            names = ("RS", "RN")
        elif k == LEAF:
            names = ("RS", "RN", "CD", "PI", "CL")
        else:
            names = ("RS", "RN", "CD", "PI")
        sched.append((k, {s: t + j for j, s in enumerate(names)}))
        if i + 1 < len(kinds):
            t += node_spacing(k, forwarding, bypassing)
    total = t + node_tail(kinds[-1], bypassing)
    return sched, total


def model_ru(kinds, forwarding: bool = True, bypassing: bool = True) -> int:
    return ru_schedule(kinds, forwarding, bypassing)[1]


def _segments(trace: QueryTrace, cfg: SimConfig):
    """Split events into front-end trips and price each one."""
    ev = trace.events
    q, kind = ev[:, 0], ev[:, 1]
    n = len(ev)
    if n == 0:
        return None
    # stack replay: the root is pushed, every event pops one node and pushes its children
    push = ev[:, 8]
    first_of_q = np.r_[True, q[1:] != q[:-1]]
    qstart = np.flatnonzero(first_of_q)
    delta = push - 1
    cum = np.cumsum(delta)
    base = np.repeat(cum[qstart] - delta[qstart], np.diff(np.r_[qstart, n]))
    height_after = 1 + cum - base
    height_before = height_after - delta
    if max(height_before.max(), height_after.max()) > cfg.max_stack_height:
        raise SimulationError(f"query stack exceeds max_stack_height={cfg.max_stack_height}")
    f, b = cfg.forwarding, cfg.bypassing
    spacing = np.where(kind == PRUNE, 2 if b else 4, 1 if f else 4)
    tail = np.where(kind == LEAF, 5, np.where(kind == PRUNE, 2 if b else 4, 4))
    prev_leaf = np.r_[False, kind[:-1] == LEAF]
    start = first_of_q | prev_leaf
    sidx = np.flatnonzero(start)
    last = np.r_[sidx[1:] - 1, n - 1]
    lat = 1 + np.add.reduceat(spacing, sidx) - spacing[last] + tail[last]
    seg = {
        "query": q[sidx], "lat": lat.astype(np.int64),
        "leaf": np.where(kind[last] == LEAF, ev[last, 3], -1),
        "m": ev[last, 4], "mode": ev[last, 5], "L": ev[last, 6], "R": ev[last, 7],
        "visits": np.add.reduceat((kind == VISIT).astype(np.int64), sidx),
        "events": np.diff(np.r_[sidx, n]),
        "pushes": np.add.reduceat(push, sidx),
        "bubbles": np.add.reduceat(spacing - 1, sidx) - (spacing[last] - 1),
    }
    seg["final"] = np.r_[seg["query"][1:] != seg["query"][:-1], True]
    return seg


class _NodeCache:
    """Leaf-set cache: entries keyed by leaf id, LRU over entries."""

    def __init__(self, capacity_nodes: int):
        self.capacity = capacity_nodes
        self.used = 0
        self.entries = OrderedDict()

    def access(self, leaf: int, m: int) -> bool:
        if leaf in self.entries:
            self.entries.move_to_end(leaf)
            return True
        if m <= self.capacity:
            while self.used + m > self.capacity:
                _, sz = self.entries.popitem(last=False)
                self.used -= sz
            self.entries[leaf] = m
            self.used += m
        return False


class _SU:
    __slots__ = ("bqb", "inflight", "busy", "pending", "last_issue", "waiting", "free_pes", "pe_busy")

    def __init__(self, n_pe):
        self.bqb = deque()
        self.inflight = 0
        self.busy = False
        self.pending = False
        self.last_issue = 0
        self.waiting = deque()
        self.free_pes = list(range(n_pe))
        self.pe_busy = 0


def simulate(trace: QueryTrace, cfg: SimConfig = SimConfig()) -> SimStats:
    """Cycle-level run of ``trace``; deterministic for identical inputs."""
    trace.validate()
    if cfg.h_top is not None and cfg.h_top != trace.h_top:
        raise TraceError(f"config h_top={cfg.h_top} but trace h_top={trace.h_top}")
    if trace.has_approx and not cfg.approx_enabled:
        raise TraceError("trace contains leader/follower events but approx_enabled is False")
    st = SimStats(queries=trace.n_queries, pe_utilization=[0.0] * cfg.num_su)
    seg = _segments(trace, cfg)
    if seg is None:
        _finish(st, cfg, trace)
        return st

    lat, leaf, m, mode, Ls, Rs, final = (seg[k] for k in ("lat", "leaf", "m", "mode", "L", "R", "final"))
    lat_l, leaf_l, m_l, mode_l = lat.tolist(), leaf.tolist(), m.tolist(), mode.tolist()
    L_l, R_l, final_l = Ls.tolist(), Rs.tolist(), final.tolist()
    nseg = len(lat_l)
    st.segments = nseg
    P = cfg.pes_per_su
    depth = cfg.latencies.pe_pipeline_depth
    qdn = cfg.latencies.qdn
    mqsn = cfg.mqsn_vs_mqmn == "mqsn"
    cap = cfg.bqb_capacity
    cache = _NodeCache(cfg.node_cache_capacity // cfg.bytes_per_node) if cfg.node_cache_enabled else None
    R_ = st.reads
    W_ = st.writes

    # static front-end traffic: one node read per event, stack pops and pushes
    ev = trace.events
    R_["top_tree_buffer"] += len(ev)
    R_["query_stack_buffer"] += len(ev)
    W_["query_stack_buffer"] += int(ev[:, 8].sum()) + trace.n_queries
    st.fe_distance_ops = int(seg["visits"].sum())
    st.fe_bubble_cycles = int(seg["bubbles"].sum())

    heap = []
    seq = 0
    fqq = deque()
    seg_first = np.flatnonzero(np.r_[True, seg["query"][1:] != seg["query"][:-1]]).tolist()
    fqq.extend(seg_first)
    W_["query_buffer"] += len(seg_first)
    free_ru = list(range(cfg.num_ru))
    sus = [_SU(P) for _ in range(cfg.num_su)]
    now = 0
    end_time = 0

    def push(t, kind, a, b=None):
        nonlocal seq
        heapq.heappush(heap, (t, seq, kind, a, b))
        seq += 1

    def dispatch(t):
        while free_ru and fqq:
            ru = heapq.heappop(free_ru)
            s = fqq.popleft()
            R_["query_buffer"] += 1
            st.fe_busy_cycles += lat_l[s]
            push(t + lat_l[s], 0, ru, s)

    def fetch_nodes(lf, mm):
        st.node_set_fetches += 1
        st.node_reads += mm
        if cache is None:
            R_["input_point_buffer"] += mm
            return
        if cache.access(lf, mm):
            st.node_cache_hits += 1
            R_["node_cache"] += mm
        else:
            st.node_cache_misses += 1
            R_["input_point_buffer"] += mm
            if mm <= cache.capacity:
                W_["node_cache"] += mm

    def item_cost(s):
        # leader check, then the node stream (leaf set or leader result)
        L = L_l[s]
        R_["leader_buffer"] += L
        if mode_l[s] == FOLLOWER:
            R_["result_buffer"] += R_l[s]
            return L + R_l[s]
        if mode_l[s] == LEADER:
            W_["leader_buffer"] += 1
            W_["result_buffer"] += R_l[s]
        return L + m_l[s]

    def admit(su_id, t):
        su = sus[su_id]
        while su.waiting and len(su.bqb) + su.inflight < cap:
            ru, s, t0 = su.waiting.popleft()
            st.fe_stall_cycles += t - t0
            su.inflight += 1
            push(t + qdn, 1, su_id, s)
            heapq.heappush(free_ru, ru)
        dispatch(t)

    def try_issue(su_id, t):
        su = sus[su_id]
        if mqsn:
            if su.busy or su.pending or not su.bqb:
                return
            search = math.ceil(len(su.bqb) / ASSOC_WIDTH)
            ready = max(su.last_issue, su.bqb[0][1]) + search
            if ready > t:
                st.search_exposed_cycles += ready - t
                su.pending = True
                push(ready, 2, su_id)
                return
            issue_mqsn(su_id, t)
        else:
            issued = False
            while su.free_pes and su.bqb:
                pe = heapq.heappop(su.free_pes)
                s, _ = su.bqb.popleft()
                R_["query_buffer"] += 1
                if mode_l[s] != FOLLOWER:
                    fetch_nodes(leaf_l[s], m_l[s])
                c = item_cost(s)
                st.pe_ops += c
                su.pe_busy += c
                st.batches += 1
                st.be_busy_cycles += c + depth
                push(t + c + depth, 4, su_id, (pe, s))
                issued = True
            if issued:
                admit(su_id, t)

    def issue_mqsn(su_id, t):
        su = sus[su_id]
        key = leaf_l[su.bqb[0][0]]
        batch, rest = [], deque()
        for item in su.bqb:
            if len(batch) < P and leaf_l[item[0]] == key:
                batch.append(item[0])
            else:
                rest.append(item)
        su.bqb = rest
        R_["query_buffer"] += len(batch)
        costs = [item_cost(s) for s in batch]
        if any(mode_l[s] != FOLLOWER for s in batch):
            fetch_nodes(key, m_l[batch[0]])
        st.pe_ops += sum(costs)
        su.pe_busy += sum(costs)
        latency = max(costs) + len(batch) - 1 + depth
        su.busy = True
        su.last_issue = t
        st.batches += 1
        st.be_busy_cycles += latency
        push(t + latency, 3, su_id, batch)
        admit(su_id, t)

    def retire(s, t):
        if final_l[s]:
            return
        fqq.append(s + 1)
        W_["query_buffer"] += 1

    dispatch(0)
    while heap:
        now, _, kind, a, b = heapq.heappop(heap)
        end_time = now
        if kind == 0:  # RU finished a trip
            ru, s = a, b
            lf = leaf_l[s]
            if lf < 0:
                heapq.heappush(free_ru, ru)
            else:
                su_id = lf % cfg.num_su
                su = sus[su_id]
                if len(su.bqb) + su.inflight < cap:
                    su.inflight += 1
                    push(now + qdn, 1, su_id, s)
                    heapq.heappush(free_ru, ru)
                else:
                    su.waiting.append((ru, s, now))
            dispatch(now)
        elif kind == 1:  # arrival at a BQB
            su = sus[a]
            su.inflight -= 1
            su.bqb.append((b, now))
            W_["query_buffer"] += 1
            try_issue(a, now)
        elif kind == 2:  # associative search finished
            sus[a].pending = False
            if not sus[a].busy and sus[a].bqb:
                issue_mqsn(a, now)
        elif kind == 3:  # MQSN batch done
            sus[a].busy = False
            for s in b:
                retire(s, now)
            dispatch(now)
            try_issue(a, now)
        else:  # MQMN PE done
            pe, s = b
            heapq.heappush(sus[a].free_pes, pe)
            retire(s, now)
            dispatch(now)
            try_issue(a, now)

    st.total_cycles = int(end_time)
    st.pe_utilization = [su.pe_busy / (P * end_time) if end_time else 0.0 for su in sus]
    _finish(st, cfg, trace)
    return st


def _finish(st: SimStats, cfg: SimConfig, trace: QueryTrace):
    # final results are written once and drained to DRAM by the double-buffered result buffer
    res = int(trace.result_sizes.sum())
    st.writes["result_buffer"] += res
    st.reads["result_buffer"] += res
    st.dram_words = res
    from .energy import energy_report
    st.energy = energy_report(st, cfg.energy)

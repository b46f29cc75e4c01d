import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcaccel import _kernels as K
from pcaccel.kdtree import KDTree
from pcaccel.synthetic import lidar_scan, synthetic_cloud
from pcaccel.twostage import (ApproxConfig, TwoStageKDTree, approx_batch_search, build_two_stage,
                              h_top_for_leaf_size, redundancy_report)


def thirteen_points():
    # 13 distinct points; with h_top=1 the two leaf sets hold 6 points each
    rng = np.random.default_rng(0)
    return rng.permutation(np.arange(13.0))[:, None] * [1.0, 0.37, 0.11] + rng.normal(0, 0.01, (13, 3))


# ---------------------------------------------------------------- structure


def test_thirteen_point_structure():
    t = TwoStageKDTree(h_top=1).fit(thirteen_points())
    assert len(t.top_interior_nodes_) == 1
    assert sorted(t.leaf_set_sizes_.tolist()) == [6, 6]


def test_h0_single_set():
    P = np.random.default_rng(1).random((50, 3))
    t = build_two_stage(P, 0)
    assert t.leaf_set_sizes_.tolist() == [50]
    res = t.query(np.random.default_rng(2).random((5, 3)), 1)
    assert (res.stats[:, 0] == 50).all()


def test_partition_and_top_tree_match_canonical():
    P = np.random.default_rng(3).random((1000, 3))
    canon = KDTree().fit(P)
    for h in range(0, 12):
        t = TwoStageKDTree(h_top=h).fit(P)
        top = t.top_interior_nodes_
        members = np.concatenate([t.perm_[top]] + t.leaf_sets_)
        assert sorted(members.tolist()) == list(range(1000))
        assert np.array_equal(t.perm_[top], canon.perm_[canon.depth_ < h])
        assert len(t.leaf_ids_) == len(set(t.leaf_ids_.tolist()))
        assert (t.leaf_ids_ < 2 ** h).all()


def test_full_height_equals_canonical_visits():
    P = np.random.default_rng(4).random((500, 3))
    Q = np.random.default_rng(5).random((100, 3))
    canon = KDTree().fit(P)
    t = TwoStageKDTree(h_top=canon.height).fit(P)
    for a, b in ((canon.query(Q, 1), t.query(Q, 1)), (canon.query_radius(Q, 0.2), t.query_radius(Q, 0.2))):
        assert np.array_equal(a.stats[:, 0], b.stats[:, 0])


def test_leaf_size_selection():
    P = np.random.default_rng(6).random((1000, 3))
    t = KDTree().fit(P)
    for s in (1, 2, 7, 64, 1000):
        h = h_top_for_leaf_size(t, s)
        assert TwoStageKDTree(h_top=h).fit(P).leaf_set_sizes_.max() <= s
        if h > 0:
            assert TwoStageKDTree(h_top=h - 1).fit(P).leaf_set_sizes_.max() > s


# ---------------------------------------------------------------- exact search


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.integers(0, 12), st.integers(0, 2**31 - 1))
def test_exact_equals_canonical(n, h, seed):
    rng = np.random.default_rng(seed)
    P = rng.integers(0, 4, (n, 3)).astype(float)
    Q = rng.random((15, 3)) * 4
    c, t = KDTree().fit(P), TwoStageKDTree(h_top=h).fit(P)
    a, b = c.query(Q, 2), t.query(Q, 2)
    assert np.array_equal(a.indices, b.indices) and np.array_equal(a.distances, b.distances)
    ra, rb = c.query_radius(Q, 1.0), t.query_radius(Q, 1.0)
    assert np.array_equal(ra.offsets, rb.offsets) and np.array_equal(ra.indices, rb.indices)


def test_two_stage_visits_more_on_thirteen():
    P = thirteen_points()
    c, t = KDTree().fit(P), TwoStageKDTree(h_top=1).fit(P)
    Q = np.random.default_rng(7).uniform(P.min(0), P.max(0), (50, 3))
    vc, vt = c.query(Q, 1).stats[:, 0], t.query(Q, 1).stats[:, 0]
    assert vt.mean() > vc.mean()
    assert (vt > vc).mean() > 0.5


# ---------------------------------------------------------------- redundancy


def test_redundancy_rows():
    P = synthetic_cloud(4000, "scene", seed=0)
    Q = P.points[::8] + 0.05
    rows = redundancy_report(P, Q, [1, 2, 4, 8, 16, 32])
    assert rows[0]["nn_ratio"] == 1.0 and rows[0]["radius_ratio"] == 1.0
    nn = [r["nn_ratio"] for r in rows]
    assert nn == sorted(nn)
    assert rows[-1]["nn_ratio"] > rows[-1]["radius_ratio"] > 1.0


def test_redundancy_bad_size():
    with pytest.raises(ValueError):
        redundancy_report(np.random.default_rng(0).random((10, 3)), np.zeros((1, 3)), [0])


# ---------------------------------------------------------------- approximate search


def lidar_tree(n=20000, h=8):
    P = lidar_scan(n, seed=1).points
    return P, TwoStageKDTree(h_top=h).fit(P)


def test_threshold_zero_is_exact():
    P, t = lidar_tree(5000, 6)
    Q = P[::7] + 0.03
    cfg = ApproxConfig(nn_threshold=0.0, radius_threshold_fraction=0.0)
    a, b = t.approx_query(Q, cfg, "nn"), t.query(Q, 1)
    for f in ("indices", "distances", "stats"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    ra, rb = t.approx_query(Q, cfg, "radius", 0.5), t.query_radius(Q, 0.5)
    for f in ("offsets", "indices", "distances", "stats"):
        assert np.array_equal(getattr(ra, f), getattr(rb, f))


def test_duplicate_queries_follow():
    P = np.random.default_rng(8).random((300, 3))
    t = TwoStageKDTree(h_top=0).fit(P)
    Q = np.repeat([[0.5, 0.5, 0.5]], 10, axis=0)
    res = t.approx_query(Q, ApproxConfig(), "nn")
    assert not res.approximated[0] and res.approximated[1:].all()
    assert (res.indices == res.indices[0]).all()
    # follower cost is L + R = one leader + its one result
    assert (res.stats[1:, 0] == 2).all()


def test_never_better_and_leaders_exact():
    P, t = lidar_tree()
    rng = np.random.default_rng(9)
    Q = P[rng.choice(len(P), 3000, replace=False)] + rng.normal(0, 0.05, (3000, 3))
    a, e = t.approx_query(Q, ApproxConfig(), "nn"), t.query(Q, 1)
    assert (a.distances[:, 0] >= e.distances[:, 0]).all()
    lead = ~a.approximated
    assert np.array_equal(a.distances[lead], e.distances[lead])
    assert a.total.nodes_visited < e.total.nodes_visited


def test_radius_followers_subset_of_truth():
    P, t = lidar_tree(10000, 6)
    Q = P[::13] + 0.02
    a, e = t.approx_query(Q, ApproxConfig(), "radius", 0.6), t.query_radius(Q, 0.6)
    for i in range(len(Q)):
        got = a[i]
        assert set(got[0].tolist()) <= set(e[i][0].tolist())
        assert (got[1] <= 0.6).all()


def test_leader_cap_and_order_determinism():
    P, t = lidar_tree(10000, 4)
    Q = P[np.random.default_rng(10).permutation(len(P))[:2000]]
    cfg = ApproxConfig(nn_threshold=0.3, leader_cap=3)
    a = t.approx_query(Q, cfg, "nn", record_trace=True)
    b = approx_batch_search(t, Q, "nn", cfg, record_trace=True)
    assert np.array_equal(a.indices, b.indices) and np.array_equal(a.events, b.events)
    ev = a.events
    leaders = ev[(ev[:, 1] == K.LEAF) & (ev[:, 5] == K.MODE_LEADER)]
    assert np.bincount(leaders[:, 3]).max() <= 3
    # every leader-check sees at most cap leaders
    assert ev[ev[:, 1] == K.LEAF, 6].max() <= 3


def test_bad_approx_config():
    for kw in ({"nn_threshold": -1}, {"radius_threshold_fraction": 1.5}, {"leader_cap": 0}):
        with pytest.raises(ValueError):
            ApproxConfig(**kw)

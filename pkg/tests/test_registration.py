import json

import numpy as np
import pytest
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from pcaccel.pointcloud import PointCloud, RigidTransform, apply_transform, rotation_about_axis
from pcaccel.registration import (BackendConfig, Correspondences, DegenerateCorrespondenceError,
                                  DistanceRejection, ErrorInjection, IcpConfig, KdClock, PipelineConfig,
                                  PipelineStageError, PointCloudRegistration, RansacRejection, SearchBackend,
                                  compute_fpfh, detect_keypoints, estimate_correspondences_kpce,
                                  estimate_normals, estimate_transform_svd, icp, preset, reject_correspondences,
                                  run_pipeline)
from pcaccel.synthetic import registration_pair, synthetic_cloud


def plane(n=2000, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    P = np.c_[rng.uniform(-3, 3, (n, 2)), rng.normal(0, noise, n) if noise else np.zeros(n)]
    return P + [0, 0, -1.5]  # below the origin so normals orient to +z


# ---------------------------------------------------------------- normals


def test_plane_normals():
    est = estimate_normals(plane(), 0.5)
    assert est.valid.all()
    np.testing.assert_allclose(np.abs(est.normals), np.tile([0, 0, 1.0], (2000, 1)), atol=1e-6)
    assert (est.normals[:, 2] > 0).all()  # toward the origin
    np.testing.assert_allclose(est.curvature, 0, atol=1e-12)


def test_isolated_point_flagged():
    P = np.vstack([plane(200), [[50.0, 50.0, 50.0]]])
    est = estimate_normals(P, 0.5)
    assert not est.valid[-1] and np.isnan(est.normals[-1]).all()


def test_noisy_plane_deviation():
    est = estimate_normals(plane(4000, noise=0.01, seed=1), 0.5)
    ang = np.degrees(np.arccos(np.clip(np.abs(est.normals[est.valid, 2]), 0, 1)))
    assert ang.mean() < 5.0


def test_normals_match_numpy_oracle():
    P = synthetic_cloud(1500, "scene", seed=2, noise=0.01).points
    est = estimate_normals(P, 0.8)
    nb = cKDTree(P).query_ball_point(P, 0.8)
    for i in range(0, 1500, 37):
        X = P[nb[i]]
        if len(X) < 3:
            assert not est.valid[i]
            continue
        w, V = np.linalg.eigh(np.cov(X.T, bias=True))
        n = V[:, 0] * (1 if V[:, 0] @ -P[i] >= 0 else -1)
        if w[1] - w[0] > 1e-6:  # skip ambiguous smallest eigenvectors
            np.testing.assert_allclose(est.normals[i], n, atol=1e-6)
        w = np.maximum(w, 0)
        assert est.curvature[i] == pytest.approx(w[0] / w.sum(), abs=1e-9)


# ---------------------------------------------------------------- keypoints


def test_flat_plane_no_keypoints():
    P = plane()
    est = estimate_normals(P, 0.5)
    assert len(detect_keypoints(P, est.curvature, est.valid, 1e-6, 0.5)) == 0


def test_threshold_zero_all_points():
    P = synthetic_cloud(800, "scene", seed=3).points
    est = estimate_normals(P, 1.0)
    kp = detect_keypoints(P, est.curvature, est.valid, 0.0, 0.0)
    assert np.array_equal(kp, np.flatnonzero(est.valid))


def test_cube_corner_retained():
    # plane z=0 plus an axis-aligned cube sitting on it
    rng = np.random.default_rng(4)
    ground = np.c_[rng.uniform(-4, 4, (6000, 2)), np.zeros(6000)]
    faces = []
    for ax in range(3):
        for v in (0.0, 2.0):
            f = rng.uniform(0, 2, (1500, 3))
            f[:, ax] = v
            faces.append(f)
    P = np.vstack([ground, *faces]) + [0, 0, -3.0]
    est = estimate_normals(P, 0.4)
    kp = detect_keypoints(P, est.curvature, est.valid, 0.05, 0.5)
    corners = np.array([[x, y, 2.0 - 3.0] for x in (0, 2) for y in (0, 2)])
    d = cKDTree(P[kp]).query(corners)[0]
    assert (d < 0.4).all()


def test_nonmax_suppression_oracle():
    P = synthetic_cloud(1200, "scene", seed=5, noise=0.01).points
    est = estimate_normals(P, 0.8)
    kp = detect_keypoints(P, est.curvature, est.valid, 0.02, 0.7)
    c = np.where(est.valid, est.curvature, -np.inf)
    nb = cKDTree(P).query_ball_point(P, 0.7)
    want = [i for i in range(len(P)) if est.valid[i] and c[i] >= 0.02
            and not any(c[j] > c[i] or (c[j] == c[i] and j < i) for j in nb[i])]
    assert kp.tolist() == want


# ---------------------------------------------------------------- FPFH


def pair_feature_ref(p1, n1, p2, n2):
    dp = p2 - p1
    d = np.linalg.norm(dp)
    a1, a2 = n1 @ dp / d, n2 @ dp / d
    if np.arccos(min(1, abs(a1))) > np.arccos(min(1, abs(a2))):
        n1, n2, dp, f3 = n2, n1, -dp, -a2
    else:
        f3 = a1
    v = np.cross(dp, n1)
    v /= np.linalg.norm(v)
    w = np.cross(n1, v)
    return np.arctan2(w @ n2, n1 @ n2), v @ n2, f3


def fpfh_ref(P, N, kp, r):
    nb = cKDTree(P).query_ball_point(P, r)

    def spfh(i):
        H = np.zeros((3, 11))
        cnt = 0
        for j in nb[i]:
            if j == i:
                continue
            f = pair_feature_ref(P[i], N[i], P[j], N[j])
            for h, (v, lo, hi) in enumerate(zip(f, (-np.pi, -1, -1), (np.pi, 1, 1))):
                H[h, min(10, max(0, int(np.floor(11 * (v - lo) / (hi - lo)))))] += 1
            cnt += 1
        return (H / cnt if cnt else H).ravel()

    out = []
    for i in kp:
        nbrs = [j for j in nb[i] if j != i]
        acc = sum(spfh(j) / np.linalg.norm(P[j] - P[i]) for j in nbrs) / len(nbrs)
        F = spfh(i) + acc
        out.append(F / np.abs(F).sum())
    return np.array(out)


def scene_with_normals(n=1500, seed=6):
    P = synthetic_cloud(n, "scene", seed=seed, noise=0.005).points
    est = estimate_normals(P, 0.8)
    return P[est.valid], est.normals[est.valid]


def test_fpfh_matches_reference():
    P, N = scene_with_normals()
    kp = np.arange(0, len(P), 97)
    d = compute_fpfh(P, N, kp, 1.0)
    assert not d.flagged.any()
    np.testing.assert_allclose(d.features, fpfh_ref(P, N, kp, 1.0), atol=1e-12)


def test_fpfh_normalised_and_flagged():
    P, N = scene_with_normals()
    P = np.vstack([P, [[99.0, 99, 99]]])
    N = np.vstack([N, [[0, 0, 1.0]]])
    d = compute_fpfh(P, N, np.arange(0, len(P), 50).tolist() + [len(P) - 1], 1.0)
    assert d.flagged[-1] and (d.features[-1] == 0).all()
    np.testing.assert_allclose(d.features[~d.flagged].sum(axis=1), 1.0, atol=1e-12)


def test_fpfh_rotation_invariance():
    P, N = scene_with_normals()
    m = RigidTransform(Rotation.from_euler("xyz", [20, -35, 70], degrees=True).as_matrix(), [3, -1, 2])
    kp = np.arange(0, len(P), 41)
    a = compute_fpfh(P, N, kp, 1.0).features
    b = compute_fpfh(m.apply(P), N @ m.R.T, kp, 1.0).features
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_fpfh_identical_geometry():
    P, N = scene_with_normals()
    shifted = P + [100.0, 0, 0]
    kp = np.arange(0, len(P), 60)
    a = compute_fpfh(P, N, kp, 1.0).features
    b = compute_fpfh(shifted, N, kp, 1.0).features
    np.testing.assert_allclose(a, b, atol=1e-9)


# ---------------------------------------------------------------- correspondences


def test_kpce_identity_and_reciprocal():
    F = np.random.default_rng(7).random((300, 33))
    c = estimate_correspondences_kpce(F, F)
    assert np.array_equal(c.source, np.arange(300)) and np.array_equal(c.target, np.arange(300))
    G = np.random.default_rng(8).random((200, 33))
    plain, rec = estimate_correspondences_kpce(F, G), estimate_correspondences_kpce(F, G, reciprocal=True)
    assert set(zip(rec.source.tolist(), rec.target.tolist())) <= set(zip(plain.source.tolist(), plain.target.tolist()))
    assert len(rec) < len(plain)
    # brute force in feature space
    D = np.linalg.norm(F[:, None] - G[None], axis=-1)
    assert np.array_equal(plain.target, D.argmin(axis=1))
    back = D.argmin(axis=0)
    assert all(back[t] == s for s, t in zip(rec.source, rec.target))
    assert len(estimate_correspondences_kpce(np.zeros((0, 33)), G)) == 0


# ---------------------------------------------------------------- SVD


def test_svd_exact_recovery():
    rng = np.random.default_rng(9)
    for _ in range(50):
        R = Rotation.random(random_state=rng).as_matrix()
        T = rng.normal(0, 3, 3)
        A = rng.normal(0, 2, (20, 3))
        tf = estimate_transform_svd(A, A @ R.T + T)
        np.testing.assert_allclose(tf.R, R, atol=1e-9)
        np.testing.assert_allclose(tf.T, T, atol=1e-9)


def test_svd_identity_and_reflection_fix():
    A = np.random.default_rng(10).normal(size=(10, 3))
    tf = estimate_transform_svd(A, A)
    np.testing.assert_allclose(tf.matrix, np.eye(4), atol=1e-12)
    # mirrored target: the best proper rotation still has det +1
    assert np.linalg.det(estimate_transform_svd(A, A * [1, 1, -1]).R) == pytest.approx(1.0)


def test_svd_degenerate():
    line = np.c_[np.arange(5.0), np.zeros(5), np.zeros(5)]
    with pytest.raises(DegenerateCorrespondenceError):
        estimate_transform_svd(line, line + 1)
    with pytest.raises(DegenerateCorrespondenceError):
        estimate_transform_svd(line[:2], line[:2])


def test_svd_noise_statistical():
    rng = np.random.default_rng(11)
    errs = []
    for _ in range(200):
        R, T = Rotation.random(random_state=rng).as_matrix(), rng.normal(0, 3, 3)
        A = rng.normal(0, 2, (100, 3))
        tf = estimate_transform_svd(A, A @ R.T + T + rng.normal(0, 0.01, (100, 3)))
        errs.append(np.linalg.norm(tf.T - T))
    assert np.mean(errs) < 0.01


# ---------------------------------------------------------------- rejection


def test_distance_rejection():
    c = Correspondences(np.arange(4), np.arange(4), np.array([0.1, 0.3, 0.2, 0.5]))
    assert reject_correspondences(c, None, None, DistanceRejection(0.25)).source.tolist() == [0, 2]


def outlier_problem(seed=12):
    src, _, _ = registration_pair(3000, seed=seed, noise=0.0)
    m = RigidTransform(rotation_about_axis([0, 0, 1], 10), [0.5, -0.2, 0.1])
    A = src.points[:400]
    B = m.apply(A)
    rng = np.random.default_rng(seed)
    bad = rng.random(400) < 0.5
    B[bad] = rng.uniform(-10, 10, (bad.sum(), 3))
    c = Correspondences(np.arange(400), np.arange(400), np.zeros(400))
    return A, B, c, bad


def test_ransac_outliers():
    A, B, c, bad = outlier_problem()
    kept = reject_correspondences(c, A, B, RansacRejection(500, 0.1, seed=0))
    k = np.zeros(400, bool)
    k[kept.source] = True
    assert k[~bad].mean() >= 0.95
    assert (~k[bad]).mean() >= 0.95


def test_ransac_all_correct_and_deterministic():
    A, B, c, bad = outlier_problem()
    m = RansacRejection(200, 0.1, seed=3)
    assert len(reject_correspondences(c.subset(~bad), A, B, m)) == (~bad).sum()
    a, b = reject_correspondences(c, A, B, m), reject_correspondences(c, A, B, m)
    assert np.array_equal(a.source, b.source)
    with pytest.raises(DegenerateCorrespondenceError):
        reject_correspondences(c.subset(slice(0, 2)), A, B, m)


# ---------------------------------------------------------------- ICP


def test_icp_translation():
    P = synthetic_cloud(10000, "scene", seed=13).points
    res = icp(P, P + [0.1, 0, 0], IcpConfig(max_iterations=20, epsilon=1e-9))
    assert len(res.log) <= 20
    np.testing.assert_allclose(res.transform.T, [0.1, 0, 0], atol=1e-4)
    errs = [r["mean_error"] for r in res.log]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_icp_identity_one_iteration():
    P = synthetic_cloud(2000, "scene", seed=14).points
    res = icp(P, P)
    assert len(res.log) == 1 and res.converged
    np.testing.assert_allclose(res.transform.matrix, np.eye(4), atol=1e-12)


def test_icp_no_correspondences():
    P = synthetic_cloud(500, seed=15).points
    res = icp(P, P + 100.0, IcpConfig(max_correspondence_distance=0.5))
    assert not res.converged and "no correspondences" in res.reason and res.log == []


# ---------------------------------------------------------------- backend and pipeline


def test_injection_kth_neighbour():
    P = np.random.default_rng(16).random((500, 3))
    Q = np.random.default_rng(17).random((50, 3))
    idx = SearchBackend(injections=(ErrorInjection("rpce", k=3),)).index(P, "rpce")
    j, d = idx.nn(Q, "rpce")
    ref_d, ref_j = cKDTree(P).query(Q, 3)
    np.testing.assert_array_equal(j, ref_j[:, 2])
    j1, _ = idx.nn(Q, "ne")  # other stages stay exact
    np.testing.assert_array_equal(j1, ref_j[:, 0])


def test_injection_ring():
    P = np.random.default_rng(18).random((800, 3))
    Q = np.random.default_rng(19).random((30, 3))
    idx = SearchBackend(injections=(ErrorInjection("ne", ring=(0.1, 0.2)),)).index(P, "ne")
    offs, nbr, dist = idx.radius(Q, 0.2, "ne")
    D = np.linalg.norm(Q[:, None] - P[None], axis=-1)
    for i in range(len(Q)):
        assert set(nbr[offs[i]:offs[i + 1]].tolist()) == set(np.flatnonzero((D[i] >= 0.1) & (D[i] <= 0.2)))


def test_bad_injection():
    for kw in ({"stage": "rpce"}, {"stage": "rpce", "k": 0}, {"stage": "nope", "k": 2},
               {"stage": "ne", "ring": (0.3, 0.1)}):
        with pytest.raises(ValueError):
            ErrorInjection(**kw)


def test_clock_separates_build():
    clock = KdClock()
    SearchBackend(clock=clock).index(np.random.default_rng(0).random((1000, 3)), "ne").nn(np.zeros((5, 3)), "ne")
    assert clock.build_seconds["ne"] > 0 and clock.seconds["ne"] > 0
    assert clock.stats["ne"].nodes_visited > 0


def test_config_json_round_trip(tmp_path):
    cfg = preset("dp4-like").with_backend(kind="two-stage", h_top=6).with_injections(ErrorInjection("rpce", k=2))
    cfg.save(tmp_path / "c.json")
    back = PipelineConfig.load(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict()
    d = json.loads(cfg.to_json())
    d["bogus"] = 1
    with pytest.raises(ValueError):
        PipelineConfig.from_dict(d)
    with pytest.raises(ValueError):
        PipelineConfig(normal_radius=0)


def test_pipeline_identical_clouds():
    P = synthetic_cloud(4000, "scene", seed=20, noise=0.01)
    res = run_pipeline(P, P, truth=RigidTransform.identity())
    assert res.error.translational < 1e-6 and res.error.rotational < 1e-4


def test_pipeline_timing_and_backend_equivalence():
    src, tgt, truth = registration_pair(5000, seed=1)
    a = run_pipeline(src, tgt, PipelineConfig(), truth)
    b = run_pipeline(src, tgt, PipelineConfig().with_backend(kind="two-stage"), truth)
    np.testing.assert_array_equal(a.transform.matrix, b.transform.matrix)
    t = a.timing
    for s in t.stage_seconds:
        assert t.kd_seconds[s] <= t.stage_seconds[s] + 1e-9
    assert 0 < t.kd_share < 1
    assert set(t.stage_seconds) == {"ne", "keypoints", "descriptors", "kpce", "rejection", "rpce", "transform"}


def test_pipeline_degrades_without_normals():
    # far too sparse for any normal: no keypoints, identity initial estimate, ICP still runs
    P = np.random.default_rng(0).random((5, 3)) * 100
    res = run_pipeline(P, P, PipelineConfig(normal_radius=0.01))
    assert res.counts["source_keypoints"] == 0
    np.testing.assert_allclose(res.transform.matrix, np.eye(4), atol=1e-9)


def test_pipeline_stage_error_attribution(monkeypatch):
    import pcaccel.registration.pipeline as pl

    def boom(*a, **k):
        raise ValueError("broken descriptor")

    monkeypatch.setattr(pl, "compute_fpfh", boom)
    src, tgt, _ = registration_pair(2000, seed=0)
    with pytest.raises(PipelineStageError) as exc:
        run_pipeline(src, tgt)
    assert exc.value.stage == "descriptors"
    assert isinstance(exc.value.__cause__, ValueError)


def test_estimator_api():
    src, tgt, truth = registration_pair(5000, seed=2)
    reg = PointCloudRegistration("dp7-like").fit(src, tgt)
    out = reg.transform(src.points[:10])
    np.testing.assert_allclose(out, truth.apply(src.points[:10]), atol=0.1)
    assert isinstance(reg.transform(src), PointCloud)
    assert reg.get_params() == {"config": "dp7-like"}

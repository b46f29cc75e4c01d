"""The seven-stage registration pipeline and its estimator wrapper."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ..pointcloud import PointCloud, RegistrationError, RigidTransform, apply_transform, registration_error
from .._validation import check_points
from .backend import STAGES, KdClock, SearchBackend
from .config import PipelineConfig
from .features import compute_fpfh, detect_keypoints, estimate_normals
from .solver import (DegenerateCorrespondenceError, estimate_correspondences_kpce,
                     estimate_transform_svd, icp, reject_correspondences)


class PipelineStageError(RuntimeError):
    """A stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class StageTiming:
    """Wall seconds per stage, with the KD-tree search and build share of each."""

    stage_seconds: dict = field(default_factory=dict)
    kd_seconds: dict = field(default_factory=dict)
    kd_build_seconds: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return sum(self.stage_seconds.values())

    @property
    def kd_total(self) -> float:
        return sum(self.kd_seconds.values())

    @property
    def kd_share(self) -> float:
        """Fraction of pipeline time spent in KD-tree searches."""
        return self.kd_total / self.total if self.total > 0 else 0.0

    def as_dict(self) -> dict:
        return {"stage_seconds": dict(self.stage_seconds), "kd_seconds": dict(self.kd_seconds),
                "kd_build_seconds": dict(self.kd_build_seconds), "total": self.total,
                "kd_share": self.kd_share}


@dataclass
class PipelineResult:
    transform: RigidTransform
    initial_transform: RigidTransform
    timing: StageTiming
    icp_log: list
    icp_reason: str
    search_stats: dict
    counts: dict
    error: RegistrationError | None = None
    initial_error: RegistrationError | None = None
    backend: SearchBackend | None = None

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "transform": self.transform.to_dict(),
            "initial_transform": self.initial_transform.to_dict(),
            "icp_iterations": len(self.icp_log),
            "icp_reason": self.icp_reason,
            "icp_log": self.icp_log,
            "search_stats": {k: v.as_dict() for k, v in self.search_stats.items()},
            "counts": self.counts,
        }
        if self.error is not None:
            d["error"] = {"translational": self.error.translational, "rotational_deg": self.error.rotational}
            d["initial_error"] = {"translational": self.initial_error.translational,
                                  "rotational_deg": self.initial_error.rotational}
        if timing:
            d["timing"] = self.timing.as_dict()
        return d


class _Stages:
    def __init__(self):
        self.seconds = {s: 0.0 for s in STAGES}

    def run(self, stage, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kw)
        except PipelineStageError:
            raise
        except Exception as exc:
            raise PipelineStageError(stage, exc) from exc
        finally:
            self.seconds[stage] += time.perf_counter() - t0


def _initial_estimate(src, tgt, corrs):
    try:
        return estimate_transform_svd(src[corrs.source], tgt[corrs.target])
    except DegenerateCorrespondenceError:
        return RigidTransform.identity()


def run_pipeline(source, target, cfg: PipelineConfig = PipelineConfig(), truth: RigidTransform | None = None,
                 record_traces: bool = False) -> PipelineResult:
    """Register ``source`` onto ``target``; the result maps source points into the target frame."""
    S = check_points(source, dim=3, name="source", allow_empty=False)
    T = check_points(target, dim=3, name="target", allow_empty=False)
    clock = KdClock()
    backend = SearchBackend(cfg.backend, cfg.injections, clock, record_traces)
    st = _Stages()

    # 1. normal estimation (the 3-d trees built here are reused downstream)
    def ne():
        si, ti = backend.index(S, "ne"), backend.index(T, "ne")
        return si, ti, estimate_normals(S, cfg.normal_radius, index=si), \
            estimate_normals(T, cfg.normal_radius, index=ti)

    s_idx, t_idx, s_ne, t_ne = st.run("ne", ne)

    # downstream feature stages work on the valid-normal subset of each cloud
    def valid_view(P, est, idx):
        if est.valid.all():
            return P, est.normals, est.curvature, idx, np.arange(len(P))
        keep = np.flatnonzero(est.valid)
        return P[keep], est.normals[keep], est.curvature[keep], backend.index(P[keep], "keypoints"), keep

    def kp():
        out = []
        for P, est, idx in ((S, s_ne, s_idx), (T, t_ne, t_idx)):
            Pv, Nv, Cv, iv, back = valid_view(P, est, idx)
            k = detect_keypoints(Pv, Cv, None, cfg.keypoints.curvature_threshold,
                                 cfg.keypoints.nonmax_radius, index=iv)
            out.append((Pv, Nv, iv, back, k))
        return out

    (sP, sN, s_iv, s_back, s_kp), (tP, tN, t_iv, t_back, t_kp) = st.run("keypoints", kp)

    def desc():
        return (compute_fpfh(sP, sN, s_kp, cfg.descriptor_radius, index=s_iv),
                compute_fpfh(tP, tN, t_kp, cfg.descriptor_radius, index=t_iv))

    s_desc, t_desc = st.run("descriptors", desc)

    def kpce():
        sk = np.flatnonzero(~s_desc.flagged)
        tk = np.flatnonzero(~t_desc.flagged)
        c = estimate_correspondences_kpce(s_desc.features[sk], t_desc.features[tk],
                                          cfg.kpce_reciprocal, backend)
        # keypoint-list positions -> point indices in the full clouds
        return type(c)(s_back[s_kp[sk[c.source]]], t_back[t_kp[tk[c.target]]], c.distance)

    corrs = st.run("kpce", kpce)

    def reject():
        if len(corrs) < 3 and cfg.rejection.method == "ransac":
            return corrs
        return reject_correspondences(corrs, S, T, cfg.rejection.build(cfg.seed))

    kept = st.run("rejection", reject)
    init = _initial_estimate(S, T, kept)

    # 6 + 7. ICP: RPCE searches are timed under "rpce", everything else under "transform"
    t0 = time.perf_counter()
    try:
        res = icp(S, T, cfg.icp, backend, init=init, target_index=t_idx)
    except Exception as exc:
        raise PipelineStageError("rpce", exc) from exc
    icp_wall = time.perf_counter() - t0
    st.seconds["rpce"] += clock.seconds["rpce"]
    st.seconds["transform"] += icp_wall - clock.seconds["rpce"]

    timing = StageTiming(dict(st.seconds), {s: clock.seconds.get(s, 0.0) for s in STAGES},
                         {s: clock.build_seconds.get(s, 0.0) for s in STAGES})
    counts = {
        "source_points": len(S), "target_points": len(T),
        "source_valid_normals": int(s_ne.valid.sum()), "target_valid_normals": int(t_ne.valid.sum()),
        "source_keypoints": len(s_kp), "target_keypoints": len(t_kp),
        "kpce_correspondences": len(corrs), "inlier_correspondences": len(kept),
    }
    out = PipelineResult(res.transform, init, timing, res.log, res.reason, dict(clock.stats), counts,
                         backend=backend)
    if truth is not None:
        out.error = registration_error(res.transform, truth)
        out.initial_error = registration_error(init, truth)
    return out


class PointCloudRegistration(BaseEstimator, TransformerMixin):
    """Estimator form of the pipeline: ``fit(source, target)`` learns the rigid
    transform, ``transform(X)`` maps points from the source frame.

    ``config`` is a PipelineConfig, a preset name or None for defaults.
    """

    def __init__(self, config=None):
        self.config = config

    def _cfg(self) -> PipelineConfig:
        from .config import preset
        if self.config is None:
            return PipelineConfig()
        if isinstance(self.config, str):
            return preset(self.config)
        if isinstance(self.config, dict):
            return PipelineConfig.from_dict(self.config)
        return self.config

    def fit(self, X, y):
        """``X`` is the source cloud, ``y`` the target cloud."""
        result = run_pipeline(X, y, self._cfg())
        result.backend = None
        self.result_ = result
        self.transform_ = result.transform
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        if isinstance(X, PointCloud):
            return apply_transform(X, self.transform_)
        return self.transform_.apply(check_points(X, dim=3))

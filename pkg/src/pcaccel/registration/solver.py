"""Correspondence estimation, rejection, SVD transform estimation and ICP."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ..pointcloud import RigidTransform, compose
from .backend import SearchBackend, SearchIndex


class DegenerateCorrespondenceError(ValueError):
    """Too few or collinear pairs to fix a rigid transform."""


class Correspondence(NamedTuple):
    source: int
    target: int
    distance: float


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Matched pairs stored column-wise."""

    source: np.ndarray
    target: np.ndarray
    distance: np.ndarray

    def __post_init__(self):
        if not (len(self.source) == len(self.target) == len(self.distance)):
            raise ValueError("correspondence columns differ in length")

    def __len__(self):
        return len(self.source)

    def __iter__(self):
        for s, t, d in zip(self.source, self.target, self.distance):
            yield Correspondence(int(s), int(t), float(d))

    def subset(self, mask) -> "Correspondences":
        return Correspondences(self.source[mask], self.target[mask], self.distance[mask])

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))


def estimate_correspondences_kpce(src_features, tgt_features, reciprocal: bool = False,
                                  backend: SearchBackend | None = None) -> Correspondences:
    """Nearest target feature for every source feature (exact, any dimension)."""
    S = np.asarray(src_features, dtype=np.float64)
    T = np.asarray(tgt_features, dtype=np.float64)
    if len(S) == 0 or len(T) == 0:
        return Correspondences.empty()
    if S.shape[1] != T.shape[1]:
        raise ValueError("feature dimensions differ")
    backend = backend or SearchBackend()
    t_idx = backend.index(T, "kpce")
    j, d = t_idx.nn(S, "kpce")
    src = np.arange(len(S))
    if reciprocal:
        s_idx = backend.index(S, "kpce")
        back, _ = s_idx.nn(T[j], "kpce")
        keep = back == src
        return Correspondences(src[keep], j[keep], d[keep])
    return Correspondences(src, j, d)


def estimate_transform_svd(source, target, eps: float = 1e-10) -> RigidTransform:
    """Least-squares rigid transform mapping ``source`` rows onto ``target`` rows."""
    A = np.asarray(source, dtype=np.float64)
    B = np.asarray(target, dtype=np.float64)
    if A.shape != B.shape or A.ndim != 2 or A.shape[1] != 3:
        raise ValueError("expected two (n, 3) arrays of equal shape")
    if len(A) < 3:
        raise DegenerateCorrespondenceError("need at least 3 pairs")
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    A0, B0 = A - ca, B - cb
    sv = np.linalg.svd(A0, compute_uv=False)
    if sv[0] == 0 or sv[1] <= eps * sv[0]:
        raise DegenerateCorrespondenceError("source points are collinear or coincident")
    H = A0.T @ B0
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cb - R @ ca)


@dataclass(frozen=True)
class DistanceRejection:
    threshold: float = 0.25

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("threshold must be > 0")


@dataclass(frozen=True)
class RansacRejection:
    iterations: int = 1000
    inlier_threshold: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be > 0")


def reject_correspondences(corrs: Correspondences, src_points, tgt_points, method) -> Correspondences:
    """Drop pairs by correspondence distance or by RANSAC consensus."""
    if isinstance(method, DistanceRejection):
        return corrs.subset(corrs.distance <= method.threshold)
    if not isinstance(method, RansacRejection):
        raise TypeError("method must be DistanceRejection or RansacRejection")
    if len(corrs) < 3:
        raise DegenerateCorrespondenceError("RANSAC needs at least 3 correspondences")
    A = np.asarray(src_points, dtype=np.float64)[corrs.source]
    B = np.asarray(tgt_points, dtype=np.float64)[corrs.target]
    rng = np.random.default_rng(method.seed)
    best = np.zeros(len(corrs), bool)
    for _ in range(method.iterations):
        pick = rng.choice(len(corrs), 3, replace=False)
        try:
            tf = estimate_transform_svd(A[pick], B[pick])
        except DegenerateCorrespondenceError:
            continue
        inl = np.linalg.norm(tf.apply(A) - B, axis=1) <= method.inlier_threshold
        if inl.sum() > best.sum():
            best = inl
    return corrs.subset(best)


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    epsilon: float = 1e-6
    max_correspondence_distance: float = 1.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not self.max_correspondence_distance > 0:
            raise ValueError("max_correspondence_distance must be > 0")


@dataclass
class IcpResult:
    transform: RigidTransform
    log: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""


def icp(source, target, cfg: IcpConfig = IcpConfig(), backend: SearchBackend | None = None,
        init: RigidTransform | None = None, target_index: SearchIndex | None = None) -> IcpResult:
    """Point-to-point ICP from ``init``. Each log row describes one iteration's
    correspondences (before its update) and the size of that update."""
    S = np.asarray(source, dtype=np.float64)
    T = np.asarray(target, dtype=np.float64)
    if len(S) == 0 or len(T) == 0:
        raise ValueError("icp needs non-empty clouds")
    backend = backend or SearchBackend()
    tindex = target_index or backend.index(T, "rpce")
    est = init or RigidTransform.identity()
    out = IcpResult(est)
    for it in range(cfg.max_iterations):
        moved = est.apply(S)
        j, d = tindex.nn(moved, "rpce")
        ok = d <= cfg.max_correspondence_distance
        if not ok.any():
            out.reason = "no correspondences within max_correspondence_distance"
            break
        try:
            step = estimate_transform_svd(moved[ok], T[j[ok]])
        except DegenerateCorrespondenceError as exc:
            out.reason = f"degenerate correspondences: {exc}"
            break
        est = compose(step, est)
        delta = step.rotation_angle + float(np.linalg.norm(step.T))
        out.log.append({"iteration": it + 1, "correspondences": int(ok.sum()),
                        "mean_error": float(d[ok].mean()), "delta": delta})
        out.transform = est
        if delta < cfg.epsilon:
            out.converged = True
            out.reason = "converged"
            break
    else:
        out.reason = "max_iterations"
    return out

"""Normal estimation, curvature keypoints and FPFH descriptors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..pointcloud import PointCloud
from .._validation import check_points
from . import _kernels as RK
from .backend import SearchBackend, SearchIndex


@dataclass(frozen=True, eq=False)
class NormalEstimate:
    """Per-point normals; rows with fewer than 3 neighbours are NaN and ``valid`` is False."""

    normals: np.ndarray
    valid: np.ndarray
    curvature: np.ndarray

    def cloud(self, points) -> PointCloud:
        """The valid-normal subset as a PointCloud."""
        P = check_points(points, dim=3)
        return PointCloud(P[self.valid], normals=self.normals[self.valid])


def _index(points, backend, index, stage):
    if index is not None:
        return index
    return (backend or SearchBackend()).index(points, stage)


def estimate_normals(cloud, radius: float, backend: SearchBackend | None = None,
                     index: SearchIndex | None = None) -> NormalEstimate:
    """Smallest-eigenvector normals of radius neighbourhoods, oriented toward the origin.

    Curvature is ``l0 / (l0 + l1 + l2)`` with eigenvalues clamped at zero.
    """
    if not radius > 0:
        raise ValueError("radius must be > 0")
    P = check_points(cloud, dim=3)
    n = len(P)
    if n == 0:
        return NormalEstimate(np.zeros((0, 3)), np.zeros(0, bool), np.zeros(0))
    idx = _index(P, backend, index, "ne")
    offs, nbr, _ = idx.radius(P, radius, "ne")
    counts = np.diff(offs)
    C = RK.covariances(P, offs, nbr)
    evals, evecs = np.linalg.eigh(C)
    evals = np.maximum(evals, 0.0)
    normals = evecs[:, :, 0].copy()
    flip = np.einsum("ij,ij->i", normals, -P) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    tot = evals.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        curv = np.where(tot > 0, evals[:, 0] / tot, 0.0)
    valid = counts >= 3
    normals[~valid] = np.nan
    curv = np.where(valid, curv, np.nan)
    return NormalEstimate(normals, valid, curv)


def detect_keypoints(cloud, curvature, valid=None, curvature_threshold: float = 0.05,
                     nonmax_radius: float = 0.5, backend: SearchBackend | None = None,
                     index: SearchIndex | None = None) -> np.ndarray:
    """Indices of local curvature maxima at or above ``curvature_threshold``.

    A candidate survives if no valid neighbour within ``nonmax_radius`` has a
    larger curvature, or an equal curvature and a lower index.
    """
    P = check_points(cloud, dim=3)
    curv = np.asarray(curvature, dtype=np.float64)
    valid = np.isfinite(curv) if valid is None else np.asarray(valid, bool)
    cand = np.flatnonzero(valid & (np.nan_to_num(curv, nan=-1.0) >= curvature_threshold))
    if len(cand) == 0:
        return cand
    if nonmax_radius < 0:
        raise ValueError("nonmax_radius must be >= 0")
    idx = _index(P, backend, index, "keypoints")
    offs, nbr, _ = idx.radius(P[cand], nonmax_radius, "keypoints")
    keep = np.ones(len(cand), bool)
    qid = np.repeat(np.arange(len(cand)), np.diff(offs))
    me = cand[qid]
    c_me = curv[me]
    c_nb = np.where(valid[nbr], curv[nbr], -np.inf)
    beats = (c_nb > c_me) | ((c_nb == c_me) & (nbr < me))
    keep[np.unique(qid[beats])] = False
    return cand[keep]


@dataclass(frozen=True, eq=False)
class Descriptors:
    features: np.ndarray
    flagged: np.ndarray


def compute_fpfh(cloud, normals, keypoints, radius: float, backend: SearchBackend | None = None,
                 index: SearchIndex | None = None) -> Descriptors:
    """33-bin FPFH descriptors for ``keypoints``; every point must carry a valid normal."""
    if not radius > 0:
        raise ValueError("radius must be > 0")
    P = check_points(cloud, dim=3)
    N = np.ascontiguousarray(normals, dtype=np.float64)
    if N.shape != P.shape or not np.all(np.isfinite(N)):
        raise ValueError("compute_fpfh needs a finite normal for every point")
    kp = np.asarray(keypoints, dtype=np.int64)
    if len(kp) == 0:
        return Descriptors(np.zeros((0, 3 * RK.NBINS)), np.zeros(0, bool))
    idx = _index(P, backend, index, "descriptors")
    k_offs, k_nbr, k_dist = idx.radius(P[kp], radius, "descriptors")
    need = np.unique(np.concatenate([kp, k_nbr]))
    s_offs, s_nbr, _ = idx.radius(P[need], radius, "descriptors")
    S = RK.spfh(P, N, need, s_offs, s_nbr)
    row_of = np.full(len(P), -1, np.int64)
    row_of[need] = np.arange(len(need))
    F, flag = RK.fpfh_combine(S, row_of, kp, k_offs, k_nbr, k_dist)
    return Descriptors(F, flag)

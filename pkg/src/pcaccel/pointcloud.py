"""Point-cloud data model, file I/O, rigid transforms and registration metrics."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "PointCloud",
    "RigidTransform",
    "RegistrationError",
    "PointCloudParseError",
    "load_kitti_bin",
    "save_kitti_bin",
    "load_xyz_ascii",
    "save_xyz_ascii",
    "apply_transform",
    "compose",
    "invert",
    "registration_error",
    "rotation_about_axis",
]


class PointCloudParseError(ValueError):
    """Raised when a point-cloud file cannot be parsed.

    ``line`` is the 1-based line number for text formats, ``None`` otherwise.
    """

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered set of 3-D points with optional per-point normals and features.

    Arrays are copied on construction and made read-only.
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        n = len(pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != n:
                raise ValueError("normals length must match points")
            norms = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", _frozen(nrm))
        if self.features is not None:
            feat = np.asarray(self.features, dtype=np.float64)
            if feat.ndim != 2 or len(feat) != n:
                raise ValueError("features must have shape (n, dim)")
            object.__setattr__(self, "features", _frozen(feat))

    def __len__(self) -> int:
        return len(self.points)

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self.points, normals, self.features)

    def subset(self, index) -> "PointCloud":
        index = np.asarray(index)
        return PointCloud(
            self.points[index],
            None if self.normals is None else self.normals[index],
            None if self.features is None else self.features[index],
        )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation ``R`` (3x3) and translation ``T`` (3,), acting as ``x -> R x + T``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    T: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        T = np.asarray(self.T, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or T.shape != (3,):
            raise ValueError("R must be 3x3 and T a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(T))):
            raise ValueError("transform must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("R must be a proper rotation (orthonormal, det +1)")
        object.__setattr__(self, "R", _frozen(R))
        object.__setattr__(self, "T", _frozen(T))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        if M.shape != (4, 4) or not np.allclose(M[3], [0, 0, 0, 1]):
            raise ValueError("expected a homogeneous 4x4 matrix")
        return cls(M[:3, :3], M[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.T
        return M

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.T

    @property
    def rotation_angle(self) -> float:
        """Rotation angle in radians."""
        return _rotation_angle(self.R)

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "T": self.T.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.array(d["R"]), np.array(d["T"]))


@dataclass(frozen=True)
class RegistrationError:
    translational: float  # meters
    rotational: float  # degrees

    def __post_init__(self):
        if self.translational < 0 or self.rotational < 0:
            raise ValueError("errors are non-negative")


def _rotation_angle(R: np.ndarray) -> float:
    # atan2 form stays accurate near 0 and pi where arccos of the trace does not
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = 0.5 * (np.trace(R) - 1.0)
    return float(math.atan2(s, c))


def rotation_about_axis(axis, degrees: float) -> np.ndarray:
    """Rodrigues rotation matrix for ``degrees`` about ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    th = math.radians(degrees)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(th) * K + (1 - math.cos(th)) * (K @ K)


def apply_transform(cloud: PointCloud, m: RigidTransform) -> PointCloud:
    pts = m.apply(cloud.points)
    normals = None if cloud.normals is None else cloud.normals @ m.R.T
    if normals is not None:
        # re-normalize to absorb rounding so the unit-norm invariant holds exactly
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals, cloud.features)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``b`` first, then ``a``."""
    return RigidTransform(a.R @ b.R, a.R @ b.T + a.T)


def invert(m: RigidTransform) -> RigidTransform:
    Rt = m.R.T
    return RigidTransform(Rt, -Rt @ m.T)


def registration_error(estimated: RigidTransform, truth: RigidTransform) -> RegistrationError:
    """Single-pair error of ``estimated`` relative to ``truth``.

    Translational error is the norm of the translation of ``truth^-1 * estimated``;
    rotational error is the angle of its rotation, in degrees.
    """
    rel = compose(invert(truth), estimated)
    return RegistrationError(
        translational=float(np.linalg.norm(rel.T)),
        rotational=math.degrees(_rotation_angle(rel.R)),
    )


# --------------------------------------------------------------------------
# File formats


def load_kitti_bin(path) -> PointCloud:
    """Read a KITTI velodyne ``.bin`` file (little-endian float32 x, y, z, intensity).

    The intensity channel is dropped.
    """
    size = os.path.getsize(path)
    if size % 16:
        raise PointCloudParseError(f"{path}: length {size} is not a multiple of 16 bytes")
    raw = np.fromfile(path, dtype="<f4").reshape(-1, 4)
    return PointCloud(raw[:, :3].astype(np.float64))


def save_kitti_bin(cloud: PointCloud, path, intensity=None) -> None:
    n = len(cloud)
    rec = np.zeros((n, 4), dtype="<f4")
    rec[:, :3] = cloud.points
    if intensity is not None:
        rec[:, 3] = intensity
    rec.tofile(path)


def load_xyz_ascii(path) -> PointCloud:
    """Read whitespace-separated ``x y z`` lines; ``#`` lines and blanks are skipped."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            toks = s.split()
            if len(toks) != 3:
                raise PointCloudParseError(f"expected 3 values, got {len(toks)}", lineno)
            try:
                row = [float(t) for t in toks]
            except ValueError:
                raise PointCloudParseError(f"non-numeric token in {s!r}", lineno) from None
            if not all(math.isfinite(v) for v in row):
                raise PointCloudParseError("non-finite coordinate", lineno)
            rows.append(row)
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


def save_xyz_ascii(cloud: PointCloud, path) -> None:
    np.savetxt(path, cloud.points, fmt="%.9g")

"""Deterministic synthetic point clouds standing in for LiDAR frames."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud, RigidTransform, apply_transform, invert, rotation_about_axis

GEOMETRIES = ("uniform-box", "planes", "gaussian-clusters", "scene")

DEFAULT_EXTENT = ((-10.0, -10.0, -2.0), (10.0, 10.0, 2.0))


def synthetic_cloud(count: int, geometry: str = "uniform-box", seed: int = 0,
                    extent=DEFAULT_EXTENT, noise: float = 0.0) -> PointCloud:
    """Generate ``count`` points of the requested ``geometry``.

    Output depends only on the arguments. ``uniform-box`` samples are guaranteed
    to lie inside ``extent`` (a ``(lo, hi)`` pair of 3-vectors).
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    if geometry not in GEOMETRIES:
        raise ValueError(f"unknown geometry {geometry!r}; expected one of {GEOMETRIES}")
    rng = np.random.default_rng(seed)
    lo, hi = (np.asarray(e, dtype=np.float64) for e in extent)
    if geometry == "uniform-box":
        pts = lo + rng.random((count, 3)) * (hi - lo)
    elif geometry == "planes":
        pts = _planes(rng, count, lo, hi)
    elif geometry == "gaussian-clusters":
        k = max(1, min(8, count // 50 or 1))
        centers = lo + rng.random((k, 3)) * (hi - lo)
        scale = 0.05 * float(np.min(hi - lo))
        which = rng.integers(0, k, size=count)
        pts = centers[which] + rng.normal(0.0, scale, size=(count, 3))
    else:
        pts = SceneLayout.default().sample(count, rng)
    if noise > 0 and count:
        pts = pts + rng.normal(0.0, noise, size=pts.shape)
    return PointCloud(pts.reshape(-1, 3))


def _planes(rng, count, lo, hi):
    # ground (z = lo) plus two orthogonal walls (x = lo, y = lo)
    which = rng.integers(0, 3, size=count)
    u = rng.random((count, 3))
    pts = lo + u * (hi - lo)
    pts[which == 0, 2] = lo[2]
    pts[which == 1, 0] = lo[0]
    pts[which == 2, 1] = lo[1]
    return pts


@dataclass(frozen=True)
class _Box:
    center: tuple
    size: tuple
    yaw: float


@dataclass(frozen=True)
class SceneLayout:
    """A street-like scene: ground, two facades, box obstacles and poles.

    Surfaces are fixed by ``layout_seed``; point samples vary with the sampling RNG.
    """

    half_extent: float = 10.0
    ground_z: float = -1.7
    wall_height: float = 4.0
    layout_seed: int = 7
    n_boxes: int = 8
    n_poles: int = 6
    ground_weight: float = 0.5

    @classmethod
    def default(cls) -> "SceneLayout":
        return cls()

    def _primitives(self):
        rng = np.random.default_rng(self.layout_seed)
        e = self.half_extent
        boxes = []
        for _ in range(self.n_boxes):
            sx, sy, sz = rng.uniform(1.0, 4.5), rng.uniform(0.8, 2.2), rng.uniform(0.6, 2.5)
            cx, cy = rng.uniform(-0.8 * e, 0.8 * e, size=2)
            boxes.append(_Box((cx, cy, self.ground_z + sz / 2), (sx, sy, sz), rng.uniform(0, math.pi)))
        poles = [tuple(rng.uniform(-0.85 * e, 0.85 * e, size=2)) for _ in range(self.n_poles)]
        return boxes, poles

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        e, g, h = self.half_extent, self.ground_z, self.wall_height
        boxes, poles = self._primitives()
        # (kind, payload, effective area)
        prims = [("ground", None, (2 * e) ** 2 * self.ground_weight),
                 ("wall", e * 0.9, 2 * e * h), ("wall", -e * 0.75, 1.4 * e * h)]
        for b in boxes:
            sx, sy, sz = b.size
            prims.append(("box", b, 2 * (sx + sy) * sz + sx * sy))
        for p in poles:
            prims.append(("pole", p, 2 * math.pi * 0.15 * h))
        area = np.array([p[2] for p in prims])
        counts = rng.multinomial(count, area / area.sum())
        out = []
        for (kind, payload, _), c in zip(prims, counts):
            if c == 0:
                continue
            u = rng.random((c, 3))
            if kind == "ground":
                pts = np.column_stack([(u[:, 0] * 2 - 1) * e, (u[:, 1] * 2 - 1) * e, np.full(c, g)])
            elif kind == "wall":
                # the second facade is shorter and offset so the scene has no mirror symmetry
                length = 2 * e if payload > 0 else 1.4 * e
                x0 = -e if payload > 0 else -0.2 * e
                pts = np.column_stack([x0 + u[:, 0] * length, np.full(c, payload), g + u[:, 1] * h])
            elif kind == "box":
                pts = _sample_box(payload, u, rng)
            else:
                th = u[:, 0] * 2 * math.pi
                pts = np.column_stack([payload[0] + 0.15 * np.cos(th), payload[1] + 0.15 * np.sin(th),
                                       g + u[:, 1] * h])
            out.append(pts)
        if not out:
            return np.zeros((0, 3))
        pts = np.concatenate(out)
        return pts[rng.permutation(len(pts))]


def _sample_box(b: _Box, u: np.ndarray, rng) -> np.ndarray:
    sx, sy, sz = b.size
    faces = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy])
    f = rng.choice(5, size=len(u), p=faces / faces.sum())
    local = (u - 0.5) * np.array([sx, sy, sz])
    local[f == 0, 0] = sx / 2
    local[f == 1, 0] = -sx / 2
    local[f == 2, 1] = sy / 2
    local[f == 3, 1] = -sy / 2
    local[f == 4, 2] = sz / 2
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return local @ R.T + np.asarray(b.center)


def truth_transform(rotation_deg: float = 5.0, translation: float = 0.5,
                    axis=(0.1, 0.2, 1.0), direction=(0.8, 0.6, 0.0)) -> RigidTransform:
    d = np.asarray(direction, dtype=np.float64)
    return RigidTransform(rotation_about_axis(axis, rotation_deg), translation * d / np.linalg.norm(d))


def registration_pair(count: int = 10000, seed: int = 0, truth: RigidTransform | None = None,
                      noise: float = 0.01, layout: SceneLayout | None = None):
    """Two independent noisy samplings of one scene, related by ``truth``.

    Returns ``(source, target, truth)`` where ``truth`` maps source coordinates
    into the target frame.
    """
    layout = layout or SceneLayout.default()
    truth = truth or truth_transform()
    rng = np.random.default_rng(seed)
    tgt = layout.sample(count, rng)
    src = layout.sample(count, rng)
    if noise > 0:
        tgt = tgt + rng.normal(0.0, noise, tgt.shape)
        src = src + rng.normal(0.0, noise, src.shape)
    source = apply_transform(PointCloud(src), invert(truth))
    return source, PointCloud(tgt), truth


# --------------------------------------------------------------------------
# LiDAR-style scans: ray casting against the scene surfaces


@dataclass(frozen=True)
class LidarModel:
    """Spinning multi-beam LiDAR; defaults follow a 64-beam automotive unit."""

    n_rings: int = 64
    elev_min_deg: float = -24.8
    elev_max_deg: float = 2.0
    max_range: float = 80.0
    range_noise: float = 0.02


def lidar_layout() -> SceneLayout:
    return SceneLayout(half_extent=25.0, n_boxes=14, n_poles=10, layout_seed=11)


def lidar_scan(count: int, seed: int = 0, pose: RigidTransform | None = None,
               layout: SceneLayout | None = None, model: LidarModel = LidarModel()) -> PointCloud:
    """Ray-cast scan of ``layout`` from sensor ``pose`` (sensor-to-world).

    Points are returned in the sensor frame, ring by ring in azimuth order, like
    a KITTI velodyne frame. ``count`` is met exactly by evenly thinning the
    returns of a slightly oversampled sweep.
    """
    layout = layout or lidar_layout()
    pose = pose or RigidTransform.identity()
    rng = np.random.default_rng(seed)
    if count == 0:
        return PointCloud(np.zeros((0, 3)))
    n_az = 64
    while True:
        pts = _cast(layout, pose, model, n_az, rng.random() * 2 * math.pi / n_az)
        if len(pts) >= count:
            break
        n_az = int(n_az * 1.3 * count / max(len(pts), 1)) + 1
    keep = np.linspace(0, len(pts) - 1, count).round().astype(np.int64)
    pts = pts[keep]
    if model.range_noise > 0:
        rn = np.linalg.norm(pts, axis=1, keepdims=True)
        pts = pts * (1 + rng.normal(0, model.range_noise, (count, 1)) / np.maximum(rn, 1e-9))
    return PointCloud(pts)


def _cast(layout: SceneLayout, pose: RigidTransform, model: LidarModel, n_az: int, az0: float):
    elev = np.radians(np.linspace(model.elev_max_deg, model.elev_min_deg, model.n_rings))
    az = az0 + np.arange(n_az) * (2 * math.pi / n_az)
    el, a = np.meshgrid(elev, az, indexing="ij")
    d_local = np.stack([np.cos(el) * np.cos(a), np.cos(el) * np.sin(a), np.sin(el)], axis=-1).reshape(-1, 3)
    d = d_local @ pose.R.T
    o = pose.T
    t = np.full(len(d), np.inf)
    e, g, h = layout.half_extent, layout.ground_z, layout.wall_height

    def plane(axis, value, lo_a, hi_a, lo_b, hi_b, ax_a, ax_b):
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = (value - o[axis]) / d[:, axis]
        p_a = o[ax_a] + tt * d[:, ax_a]
        p_b = o[ax_b] + tt * d[:, ax_b]
        ok = (tt > 1e-6) & (p_a >= lo_a) & (p_a <= hi_a) & (p_b >= lo_b) & (p_b <= hi_b)
        np.minimum(t, np.where(ok, tt, np.inf), out=t)

    plane(2, g, -e, e, -e, e, 0, 1)
    plane(1, e * 0.36, -e, e, g, g + h, 0, 2)
    plane(1, -e * 0.3, -0.2 * e, e, g, g + h, 0, 2)
    boxes, poles = layout._primitives()
    for b in boxes:
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        Rb = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        ol = (o - np.asarray(b.center)) @ Rb
        dl = d @ Rb
        half = np.asarray(b.size) / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - ol) / dl
            t2 = (half - ol) / dl
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        ok = (tmax >= tmin) & (tmin > 1e-6)
        np.minimum(t, np.where(ok, tmin, np.inf), out=t)
    for px, py in poles:
        ox, oy = o[0] - px, o[1] - py
        A = d[:, 0] ** 2 + d[:, 1] ** 2
        B = 2 * (ox * d[:, 0] + oy * d[:, 1])
        C = ox * ox + oy * oy - 0.15 ** 2
        disc = B * B - 4 * A * C
        with np.errstate(invalid="ignore", divide="ignore"):
            tt = (-B - np.sqrt(disc)) / (2 * A)
        z = o[2] + tt * d[:, 2]
        ok = (disc >= 0) & (tt > 1e-6) & (z >= g) & (z <= g + h)
        np.minimum(t, np.where(ok, tt, np.inf), out=t)
    hit = t <= model.max_range
    # points in the sensor frame, ring-major order
    return d_local[hit] * t[hit, None]


def lidar_pair(count: int = 50000, seed: int = 0, truth: RigidTransform | None = None,
               layout: SceneLayout | None = None, model: LidarModel = LidarModel()):
    """Two scans of one scene; ``truth`` maps source-frame points into the target frame."""
    truth = truth or truth_transform()
    target = lidar_scan(count, seed * 2 + 1, None, layout, model)
    source = lidar_scan(count, seed * 2 + 2, truth, layout, model)
    return source, target, truth

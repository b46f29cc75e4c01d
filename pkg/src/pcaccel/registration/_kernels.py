"""numba kernels for neighbourhood statistics and FPFH histograms."""

import math

import numpy as np
from numba import njit

NBINS = 11


@njit(cache=True)
def covariances(points, offs, idx):
    """Per-query 3x3 covariance of its CSR neighbourhood (population form)."""
    n = len(offs) - 1
    C = np.zeros((n, 3, 3))
    for q in range(n):
        a, b = offs[q], offs[q + 1]
        m = b - a
        if m == 0:
            continue
        mu = np.zeros(3)
        for t in range(a, b):
            for j in range(3):
                mu[j] += points[idx[t], j]
        mu /= m
        for t in range(a, b):
            p = idx[t]
            for r in range(3):
                dr = points[p, r] - mu[r]
                for c in range(r, 3):
                    C[q, r, c] += dr * (points[p, c] - mu[c])
        for r in range(3):
            for c in range(r, 3):
                C[q, r, c] /= m
                C[q, c, r] = C[q, r, c]
    return C


@njit(cache=True)
def _bin(v, lo, hi):
    b = int(math.floor(NBINS * (v - lo) / (hi - lo)))
    if b < 0:
        return 0
    if b >= NBINS:
        return NBINS - 1
    return b


@njit(cache=True)
def pair_features(p1, n1, p2, n2):
    """(f1, f2, f3, d): theta-like atan2 angle, alpha-like v.n2, phi-like cosine, distance."""
    dx, dy, dz = p2[0] - p1[0], p2[1] - p1[1], p2[2] - p1[2]
    d = math.sqrt(dx * dx + dy * dy + dz * dz)
    if d == 0.0:
        return 0.0, 0.0, 0.0, 0.0
    a1 = (n1[0] * dx + n1[1] * dy + n1[2] * dz) / d
    a2 = (n2[0] * dx + n2[1] * dy + n2[2] * dz) / d
    # use the point whose normal makes the smaller angle with the line as the source
    if math.acos(min(1.0, abs(a1))) > math.acos(min(1.0, abs(a2))):
        ux, uy, uz = n2[0], n2[1], n2[2]
        mx, my, mz = n1[0], n1[1], n1[2]
        dx, dy, dz = -dx, -dy, -dz
        f3 = -a2
    else:
        ux, uy, uz = n1[0], n1[1], n1[2]
        mx, my, mz = n2[0], n2[1], n2[2]
        f3 = a1
    vx = dy * uz - dz * uy
    vy = dz * ux - dx * uz
    vz = dx * uy - dy * ux
    vn = math.sqrt(vx * vx + vy * vy + vz * vz)
    if vn == 0.0:
        return 0.0, 0.0, f3, d
    vx, vy, vz = vx / vn, vy / vn, vz / vn
    wx = uy * vz - uz * vy
    wy = uz * vx - ux * vz
    wz = ux * vy - uy * vx
    f2 = vx * mx + vy * my + vz * mz
    f1 = math.atan2(wx * mx + wy * my + wz * mz, ux * mx + uy * my + uz * mz)
    return f1, f2, f3, d


@njit(cache=True)
def spfh(points, normals, centers, offs, idx):
    """Simplified histograms: three 11-bin histograms, each summing to 1 (or all zero)."""
    n = len(centers)
    H = np.zeros((n, 3 * NBINS))
    for q in range(n):
        c = centers[q]
        cnt = 0
        for t in range(offs[q], offs[q + 1]):
            j = idx[t]
            if j == c:
                continue
            f1, f2, f3, d = pair_features(points[c], normals[c], points[j], normals[j])
            if d == 0.0:
                continue
            H[q, _bin(f1, -math.pi, math.pi)] += 1.0
            H[q, NBINS + _bin(f2, -1.0, 1.0)] += 1.0
            H[q, 2 * NBINS + _bin(f3, -1.0, 1.0)] += 1.0
            cnt += 1
        if cnt > 0:
            for b in range(3 * NBINS):
                H[q, b] /= cnt
    return H


@njit(cache=True)
def fpfh_combine(S, row_of, keypoints, offs, idx, dist):
    """Own SPFH plus the 1/d-weighted mean of neighbour SPFHs, L1-normalised.

    Returns (features, flagged) where flagged marks keypoints with no usable
    neighbour.
    """
    n = len(keypoints)
    F = np.zeros((n, S.shape[1]))
    flag = np.zeros(n, np.bool_)
    for q in range(n):
        c = keypoints[q]
        k = 0
        acc = np.zeros(S.shape[1])
        for t in range(offs[q], offs[q + 1]):
            j = idx[t]
            if j == c or dist[t] == 0.0:
                continue
            acc += S[row_of[j]] / dist[t]
            k += 1
        if k == 0:
            flag[q] = True
            continue
        F[q] = S[row_of[c]] + acc / k
        s = 0.0
        for b in range(F.shape[1]):
            s += abs(F[q, b])
        if s > 0.0:
            F[q] /= s
        else:
            flag[q] = True
    return F, flag

"""Input validation helpers shared by the estimators."""

import numpy as np
from sklearn.utils import check_array

from .pointcloud import PointCloud


def check_points(X, dim=None, name="X", allow_empty=True):
    """Return ``X`` as a C-contiguous float64 ``(n, dim)`` array.

    Accepts a :class:`PointCloud` or anything array-like.
    """
    if isinstance(X, PointCloud):
        X = X.points
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0 and allow_empty:
        return np.zeros((0, dim if dim is not None else (X.shape[-1] if X.ndim == 2 else 3)))
    X = check_array(X, dtype=np.float64, order="C", ensure_min_samples=1, input_name=name)
    if dim is not None and X.shape[1] != dim:
        raise ValueError(f"{name} has {X.shape[1]} columns, expected {dim}")
    return X


def check_query(q, dim):
    q = np.asarray(q, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    return check_points(q, dim=dim, name="query", allow_empty=False)

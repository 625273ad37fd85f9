"""Input coercion helpers shared by the estimator and the CLI."""

from __future__ import annotations

from typing import List

import numpy as np

from .exceptions import EmptyInput, InvalidArgument
from .geometry import PointCloud


def check_cloud(X, allow_empty: bool = False) -> PointCloud:
    """Coerce ``X`` to a PointCloud.

    Accepts a PointCloud, an (n, 3) array of xyz, or an (n, 6) array of
    xyz plus normals (rescaled to unit length).
    """
    if isinstance(X, PointCloud):
        cloud = X
    else:
        if hasattr(X, "cloud") and isinstance(X.cloud, PointCloud):
            cloud = X.cloud
        else:
            a = np.asarray(X, dtype=np.float64)
            if a.ndim != 2 or a.shape[1] not in (3, 6):
                raise InvalidArgument(f"expected an (n, 3) or (n, 6) array, got shape {a.shape}")
            if a.shape[1] == 6:
                nrm = a[:, 3:]
                lens = np.linalg.norm(nrm, axis=1, keepdims=True)
                if np.any(lens == 0):
                    raise InvalidArgument("normals must be non-zero")
                cloud = PointCloud(a[:, :3], nrm / lens)
            else:
                cloud = PointCloud(a)
    if not allow_empty and len(cloud) == 0:
        raise EmptyInput("point cloud is empty")
    return cloud


def check_clouds(X, allow_empty: bool = False) -> List[PointCloud]:
    """Coerce a single cloud or a sequence of clouds to a list."""
    if isinstance(X, PointCloud) or (isinstance(X, np.ndarray) and X.ndim == 2):
        return [check_cloud(X, allow_empty)]
    try:
        items = list(X)
    except TypeError:
        raise InvalidArgument("expected a point cloud or a sequence of point clouds") from None
    if not items:
        raise EmptyInput("no point clouds given")
    return [check_cloud(x, allow_empty) for x in items]


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or int(value) != value or int(value) < 1:
        raise InvalidArgument(f"{name} must be a positive integer, got {value!r}")
    return int(value)

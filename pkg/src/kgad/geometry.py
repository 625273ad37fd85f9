"""Point-cloud value types, exact spatial indexing, sampling and normals."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from .exceptions import EmptyInput, InvalidArgument

logger = logging.getLogger(__name__)

SAMPLING_STRATEGIES = ("us", "rs", "fs")


def _frozen(a: NDArray) -> NDArray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered set of 3D points with optional unit normals.

    Arrays are stored as read-only float64 copies; point order defines the
    stable integer index of every point.
    """

    points: NDArray[np.float64]
    normals: Optional[NDArray[np.float64]] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim == 1 and pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidArgument(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgument("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64, copy=True)
            if nrm.shape != pts.shape:
                raise InvalidArgument(
                    f"normals shape {nrm.shape} does not match points {pts.shape}"
                )
            if len(nrm) and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
                raise InvalidArgument("normals must have unit length")
            object.__setattr__(self, "normals", _frozen(nrm))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, indices: ArrayLike) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        nrm = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], nrm)

    def transformed(self, transform: "RigidTransform") -> "PointCloud":
        nrm = None if self.normals is None else transform.rotate(self.normals)
        if nrm is not None:
            nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
        return PointCloud(transform.apply(self.points), nrm)

    def with_normals(self, normals: Optional[ArrayLike]) -> "PointCloud":
        return PointCloud(self.points, normals)

    def centroid(self) -> NDArray[np.float64]:
        return self.points.mean(axis=0)

    def diameter(self) -> float:
        """Twice the largest distance from the centroid (rigid-invariant scale)."""
        if len(self) == 0:
            return 0.0
        return 2.0 * float(np.max(np.linalg.norm(self.points - self.centroid(), axis=1)))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``x -> R @ x + t``."""

    rotation: NDArray[np.float64] = field(default_factory=lambda: np.eye(3))
    translation: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64, copy=True)
        t = np.array(self.translation, dtype=np.float64, copy=True).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise InvalidArgument("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidArgument("transform entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidArgument("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> "RigidTransform":
        M = np.asarray(matrix, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec: ArrayLike, translation: ArrayLike = (0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rotvec_to_matrix(rotvec), translation)

    def as_matrix(self) -> NDArray[np.float64]:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points: ArrayLike) -> NDArray[np.float64]:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def rotate(self, vectors: ArrayLike) -> NDArray[np.float64]:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        R = self.rotation @ other.rotation
        return RigidTransform(orthonormalize(R), self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def rotation_error(self, other: "RigidTransform") -> float:
        """Frobenius norm of the rotation difference."""
        return float(np.linalg.norm(self.rotation - other.rotation))

    def translation_error(self, other: "RigidTransform") -> float:
        return float(np.linalg.norm(self.translation - other.translation))


def orthonormalize(R: NDArray) -> NDArray[np.float64]:
    """Nearest rotation matrix (SVD projection onto SO(3))."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rotvec_to_matrix(rotvec: ArrayLike) -> NDArray[np.float64]:
    w = np.asarray(rotvec, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(w))
    if theta < 1e-15:
        return np.eye(3)
    k = w / theta
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> NDArray[np.float64]:
    """Rotation about a uniform random axis by an angle uniform in [0, max_angle]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return rotvec_to_matrix(axis * rng.uniform(0.0, max_angle))


class SpatialIndex:
    """Immutable exact nearest-neighbour index over rows of any dimension.

    Backed by :class:`scipy.spatial.cKDTree`; results match a brute-force
    linear scan (ties aside, which have no canonical order).
    """

    def __init__(self, data: ArrayLike):
        if isinstance(data, PointCloud):
            data = data.points
        rows = np.asarray(data, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows.reshape(-1, 1)
        if rows.shape[0] == 0:
            raise EmptyInput("cannot index an empty point set")
        self._rows = _frozen(rows.copy())
        self._tree = cKDTree(self._rows)

    def __len__(self) -> int:
        return self._rows.shape[0]

    @property
    def data(self) -> NDArray[np.float64]:
        return self._rows

    def knn(self, queries: ArrayLike, k: int = 1):
        """Return ``(distances, indices)`` of shape ``(m, k)`` sorted by distance."""
        q = np.asarray(queries, dtype=np.float64)
        single = q.ndim == 1
        q = np.atleast_2d(q)
        k = int(k)
        if k < 1:
            raise InvalidArgument("k must be >= 1")
        k = min(k, len(self))
        d, i = self._tree.query(q, k=k)
        d = np.asarray(d).reshape(q.shape[0], k)
        i = np.asarray(i, dtype=np.int64).reshape(q.shape[0], k)
        if single:
            return d[0], i[0]
        return d, i

    def radius(self, queries: ArrayLike, r: float):
        """Indices within distance ``r`` (inclusive), sorted ascending.

        A single query returns one array; a batch returns a list of arrays.
        """
        q = np.asarray(queries, dtype=np.float64)
        if q.ndim == 1:
            return np.array(sorted(self._tree.query_ball_point(q, r)), dtype=np.int64)
        hits = self._tree.query_ball_point(q, r)
        return [np.array(sorted(h), dtype=np.int64) for h in hits]

    def pairs(self, r: float) -> NDArray[np.int64]:
        """All unordered pairs ``(i, j)``, ``i < j``, closer than ``r``."""
        return self._tree.query_pairs(r, output_type="ndarray").astype(np.int64)


def build_index(cloud) -> SpatialIndex:
    if (isinstance(cloud, PointCloud) and len(cloud) == 0) or np.size(cloud) == 0:
        raise EmptyInput("cannot index an empty cloud")
    return SpatialIndex(cloud)


def _points_of(cloud) -> NDArray[np.float64]:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64)


def _check_count(n: int, m: int) -> None:
    if m < 1:
        raise InvalidArgument(f"sample size must be >= 1, got {m}")
    if m > n:
        raise InvalidArgument(f"cannot sample {m} points from {n}")


def farthest_point_sample(cloud, m: int, seed: int = 0) -> NDArray[np.int64]:
    """Greedy farthest-point sampling.

    The first index is drawn from ``seed``; every later index maximises the
    distance to the chosen set, ties going to the lowest index.
    """
    pts = _points_of(cloud)
    n = pts.shape[0]
    _check_count(n, m)
    out = np.empty(m, dtype=np.int64)
    out[0] = np.random.default_rng(seed).integers(n)
    cols = [np.ascontiguousarray(pts[:, a]) for a in range(pts.shape[1])]
    min_d2 = np.full(n, np.inf)
    d2 = np.empty(n)
    tmp = np.empty(n)
    for i in range(1, m):
        p = pts[out[i - 1]]
        d2.fill(0.0)
        for a, col in enumerate(cols):
            np.subtract(col, p[a], out=tmp)
            np.multiply(tmp, tmp, out=tmp)
            d2 += tmp
        np.minimum(min_d2, d2, out=min_d2)
        out[i] = int(min_d2.argmax())
    return out


def random_sample(cloud, m: int, seed: int = 0) -> NDArray[np.int64]:
    n = _points_of(cloud).shape[0]
    _check_count(n, m)
    return np.random.default_rng(seed).choice(n, size=m, replace=False).astype(np.int64)


def uniform_sample(cloud, m: int) -> NDArray[np.int64]:
    """Every ``floor(n / m)``-th index in storage order, starting at 0."""
    n = _points_of(cloud).shape[0]
    _check_count(n, m)
    stride = n // m
    return np.arange(0, stride * m, stride, dtype=np.int64)


def sample_indices(cloud, m: int, strategy: str = "fs", seed: int = 0) -> NDArray[np.int64]:
    strategy = strategy.lower()
    if strategy == "fs":
        return farthest_point_sample(cloud, m, seed)
    if strategy == "rs":
        return random_sample(cloud, m, seed)
    if strategy == "us":
        return uniform_sample(cloud, m)
    raise InvalidArgument(f"unknown sampling strategy {strategy!r}; expected one of {SAMPLING_STRATEGIES}")


def downsample_indices(cloud, m: int, strategy: str = "fs", seed: int = 0,
                       prethin: int = 8) -> NDArray[np.int64]:
    """Indices of an ``m``-point working subset (all points if ``m >= n``).

    Farthest-point sampling is quadratic-ish, so clouds larger than
    ``prethin * m`` are first thinned by a seeded random draw.
    """
    pts = _points_of(cloud)
    n = pts.shape[0]
    if m >= n:
        return np.arange(n, dtype=np.int64)
    if strategy == "fs" and prethin and n > prethin * m:
        pool = np.sort(random_sample(pts, prethin * m, seed))
        return pool[farthest_point_sample(pts[pool], m, seed)]
    return sample_indices(pts, m, strategy, seed)


def mean_spacing(cloud, max_queries: int = 20000) -> float:
    """Average distance from a point to its nearest neighbour."""
    pts = _points_of(cloud)
    n = pts.shape[0]
    if n < 2:
        raise InvalidArgument("spacing needs at least two points")
    tree = cKDTree(pts)
    step = max(1, n // max_queries)
    d, _ = tree.query(pts[::step], k=2)
    return float(np.mean(d[:, 1]))


def estimate_normals(cloud: PointCloud, k: int = 30, return_degenerate: bool = False):
    """PCA normals from the ``k``-nearest-neighbour covariance.

    Each normal is the eigenvector of the smallest covariance eigenvalue,
    oriented away from the cloud centroid. Neighbourhoods whose covariance
    has rank < 2 get ``+z`` and are reported in the degeneracy mask.
    """
    pts = _points_of(cloud)
    n = pts.shape[0]
    if k < 3:
        raise InvalidArgument("normal estimation needs k >= 3")
    if n <= k:
        raise InvalidArgument(f"cloud of {n} points is too small for k={k}")
    tree = cKDTree(pts)
    normals = np.empty((n, 3))
    degenerate = np.zeros(n, dtype=bool)
    chunk = 50000
    for start in range(0, n, chunk):
        sl = slice(start, min(n, start + chunk))
        _, nbr = tree.query(pts[sl], k=k)
        nb = pts[nbr]
        nb = nb - nb.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", nb, nb) / k
        evals, evecs = np.linalg.eigh(cov)
        normals[sl] = evecs[:, :, 0]
        scale = np.maximum(evals[:, 2], np.finfo(float).tiny)
        degenerate[sl] = (evals[:, 2] <= 0) | (evals[:, 1] <= 1e-10 * scale)
    outward = np.einsum("ij,ij->i", normals, pts - pts.mean(axis=0))
    normals[outward < 0] *= -1.0
    normals[degenerate] = (0.0, 0.0, 1.0)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    if degenerate.any():
        logger.warning("%d of %d points have degenerate neighbourhoods", int(degenerate.sum()), n)
    out = PointCloud(pts, normals)
    if return_degenerate:
        return out, degenerate
    return out

"""Salient keypoint detectors (ISS, Harris3D) and keypoint subsampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .exceptions import EmptyKeypoints, InvalidArgument
from .geometry import PointCloud, estimate_normals, mean_spacing, sample_indices

logger = logging.getLogger(__name__)

DETECTORS = ("iss", "harris3d", "none")


@dataclass(frozen=True, eq=False)
class KeypointSet:
    positions: NDArray[np.float64]
    detector: str
    indices: Optional[NDArray[np.int64]] = None
    responses: Optional[NDArray[np.float64]] = None
    shortfall: bool = False
    fallback: bool = False

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if pos.shape[0] == 0:
            raise EmptyKeypoints("keypoint set is empty")
        if not np.all(np.isfinite(pos)):
            raise InvalidArgument("keypoint positions must be finite")
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def subset(self, idx, **flags) -> "KeypointSet":
        idx = np.asarray(idx, dtype=np.int64)
        return KeypointSet(
            self.positions[idx],
            self.detector,
            None if self.indices is None else self.indices[idx],
            None if self.responses is None else self.responses[idx],
            **flags,
        )


def _pair_lists(tree: cKDTree, radius: float):
    und = tree.query_pairs(radius, output_type="ndarray").astype(np.int64)
    own = np.concatenate([und[:, 0], und[:, 1]])
    nbr = np.concatenate([und[:, 1], und[:, 0]])
    return own, nbr


def _greedy_nms(points, responses, candidates, radius: float) -> NDArray[np.int64]:
    """Keep the strongest candidates so that kept points are >= radius apart."""
    if candidates.size == 0:
        return candidates
    order = candidates[np.lexsort((candidates, -responses[candidates]))]
    tree = cKDTree(points)
    suppressed = np.zeros(points.shape[0], dtype=bool)
    kept = []
    for i in order:
        if suppressed[i]:
            continue
        kept.append(i)
        suppressed[tree.query_ball_point(points[i], radius)] = True
    return np.asarray(kept, dtype=np.int64)


def iss_saliency(cloud: PointCloud, salient_radius: float, gamma21: float = 0.975,
                 gamma32: float = 0.975, min_neighbors: int = 5) -> NDArray[np.float64]:
    """Smallest scatter eigenvalue for points passing both ratio tests, else 0."""
    pts = cloud.points
    n = pts.shape[0]
    own, nbr = _pair_lists(cKDTree(pts), salient_radius)
    count = np.bincount(own, minlength=n).astype(np.float64) + 1.0
    s1 = pts.copy()
    s2 = np.einsum("ni,nj->nij", pts, pts)
    for a in range(3):
        s1[:, a] += np.bincount(own, weights=pts[nbr, a], minlength=n)
        for b in range(a, 3):
            acc = np.bincount(own, weights=pts[nbr, a] * pts[nbr, b], minlength=n)
            s2[:, a, b] += acc
            if b != a:
                s2[:, b, a] += acc
    mean = s1 / count[:, None]
    cov = s2 / count[:, None, None] - np.einsum("ni,nj->nij", mean, mean)
    ev = np.linalg.eigvalsh(cov)  # ascending: l3 <= l2 <= l1
    l3, l2, l1 = ev[:, 0], ev[:, 1], ev[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = ((count >= min_neighbors) & (l1 > 0) & (l2 > 0)
              & (l2 / l1 < gamma21) & (l3 / l2 < gamma32) & (l3 > 1e-12 * l1))
    return np.where(ok, l3, 0.0)


def detect_iss(cloud: PointCloud, salient_radius: Optional[float] = None,
               nms_radius: Optional[float] = None, gamma21: float = 0.975,
               gamma32: float = 0.975, min_neighbors: int = 5) -> KeypointSet:
    """Intrinsic Shape Signatures keypoints.

    Radii default to 6x and 4x the mean nearest-neighbour spacing.
    """
    if len(cloud) < min_neighbors:
        raise EmptyKeypoints(f"ISS needs at least {min_neighbors} points")
    if not (0 < gamma21 < 1 and 0 < gamma32 < 1):
        raise InvalidArgument("ISS eigenvalue ratios must lie in (0, 1)")
    spacing = None
    if salient_radius is None or nms_radius is None:
        spacing = mean_spacing(cloud)
    salient_radius = 6.0 * spacing if salient_radius is None else salient_radius
    nms_radius = 4.0 * spacing if nms_radius is None else nms_radius
    if salient_radius <= 0 or nms_radius <= 0:
        raise InvalidArgument("ISS radii must be positive")
    resp = iss_saliency(cloud, salient_radius, gamma21, gamma32, min_neighbors)
    kept = _greedy_nms(cloud.points, resp, np.flatnonzero(resp > 0), nms_radius)
    if kept.size == 0:
        raise EmptyKeypoints("ISS found no salient points")
    return KeypointSet(cloud.points[kept], "iss", kept, resp[kept])


def harris3d_response(cloud: PointCloud, radius: float, k_harris: float = 0.04,
                      normal_k: int = 30) -> NDArray[np.float64]:
    """Harris corner measure on tangent-plane projections of neighbour normals.

    The tangential part of a neighbour's normal is the local surface
    gradient; its second-moment matrix is rank <= 2, so ``det`` is taken
    over the tangent plane (second elementary symmetric polynomial).
    """
    if not cloud.has_normals:
        cloud = estimate_normals(cloud, k=min(normal_k, len(cloud) - 1))
    pts, nrm = cloud.points, cloud.normals
    n = pts.shape[0]
    own, nbr = _pair_lists(cKDTree(pts), radius)
    ni, nj = nrm[own], nrm[nbr]
    g = nj - np.einsum("ij,ij->i", nj, ni)[:, None] * ni
    count = np.bincount(own, minlength=n).astype(np.float64) + 1.0
    M = np.zeros((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            acc = np.bincount(own, weights=g[:, a] * g[:, b], minlength=n) / count
            M[:, a, b] = acc
            M[:, b, a] = acc
    tr = np.trace(M, axis1=1, axis2=2)
    tr_sq = np.einsum("nij,nji->n", M, M)
    det2 = 0.5 * (tr * tr - tr_sq)
    return det2 - k_harris * tr * tr


def detect_harris3d(cloud: PointCloud, radius: Optional[float] = None, k_harris: float = 0.04,
                    threshold: float = 0.0, nms_radius: Optional[float] = None,
                    percentile: float = 95.0) -> KeypointSet:
    """Harris3D keypoints: response above ``threshold`` and the top
    ``100 - percentile`` percent, then greedy non-max suppression."""
    if len(cloud) < 5:
        raise EmptyKeypoints("Harris3D needs at least 5 points")
    spacing = None
    if radius is None or nms_radius is None:
        spacing = mean_spacing(cloud)
    radius = 6.0 * spacing if radius is None else radius
    nms_radius = 4.0 * spacing if nms_radius is None else nms_radius
    if radius <= 0 or nms_radius <= 0:
        raise InvalidArgument("Harris3D radii must be positive")
    resp = harris3d_response(cloud, radius, k_harris)
    cut = np.percentile(resp, percentile) if percentile > 0 else -np.inf
    cand = np.flatnonzero((resp > threshold) & (resp >= cut))
    kept = _greedy_nms(cloud.points, resp, cand, nms_radius)
    if kept.size == 0:
        raise EmptyKeypoints("Harris3D found no responses above threshold")
    return KeypointSet(cloud.points[kept], "harris3d", kept, resp[kept])


def subsample_keypoints(keys: KeypointSet, m: int, strategy: str = "fs", seed: int = 0) -> KeypointSet:
    if m < 1:
        raise InvalidArgument("number of keypoints must be >= 1")
    if m >= len(keys):
        return keys.subset(np.arange(len(keys)), shortfall=m > len(keys), fallback=keys.fallback)
    idx = sample_indices(keys.positions, m, strategy, seed)
    return keys.subset(idx, fallback=keys.fallback)


def select_centroids(cloud: PointCloud, detector: str = "iss", m: int = 5, strategy: str = "fs",
                     seed: int = 0, **detector_params) -> KeypointSet:
    """Detect keypoints on ``cloud`` and reduce them to ``m`` cluster centroids.

    ``detector="none"`` samples centroids straight from the cloud. A detector
    yielding fewer than ``m`` keypoints falls back to FPS over the cloud.
    """
    detector = detector.lower()
    if detector not in DETECTORS:
        raise InvalidArgument(f"unknown detector {detector!r}; expected one of {DETECTORS}")
    m = min(m, len(cloud))
    if detector == "none":
        idx = sample_indices(cloud, m, strategy, seed)
        return KeypointSet(cloud.points[idx], "none", idx)
    fn = detect_iss if detector == "iss" else detect_harris3d
    try:
        keys = fn(cloud, **detector_params)
    except EmptyKeypoints:
        keys = None
    if keys is None or len(keys) < m:
        logger.warning("%s returned %s keypoints (< %d); falling back to FPS over the cloud",
                       detector, 0 if keys is None else len(keys), m)
        idx = sample_indices(cloud, m, "fs", seed)
        return KeypointSet(cloud.points[idx], "none", idx, fallback=True)
    return subsample_keypoints(keys, m, strategy, seed)

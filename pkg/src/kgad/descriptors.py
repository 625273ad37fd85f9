"""Per-point features (raw coordinates, FPFH) and score fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from .exceptions import EmptyInput, InvalidArgument
from .geometry import PointCloud

FEATURE_KINDS = ("raw", "fpfh")
FEATURE_DIMS = {"raw": 3, "fpfh": 33}
SWAP_TOL = 1e-12
FPFH_BINS = 11
FPFH_DIM = 3 * FPFH_BINS


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """One feature row per source point.

    ``isolated`` marks FPFH rows left at zero because the point had fewer
    than two neighbours inside the support radius.
    """

    rows: NDArray[np.float64]
    kind: str
    isolated: Optional[NDArray[np.bool_]] = None

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise InvalidArgument(f"unknown feature kind {self.kind!r}")
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise InvalidArgument("feature rows must be 2-D")
        if rows.shape[1] != FEATURE_DIMS[self.kind]:
            raise InvalidArgument(f"{self.kind} rows need {FEATURE_DIMS[self.kind]} columns, got {rows.shape[1]}")
        object.__setattr__(self, "rows", rows)

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def subset(self, indices: ArrayLike) -> "FeatureMatrix":
        idx = np.asarray(indices, dtype=np.int64)
        iso = None if self.isolated is None else self.isolated[idx]
        return FeatureMatrix(self.rows[idx], self.kind, iso)


@dataclass(frozen=True)
class FusionWeights:
    lam: float = 0.01

    def __post_init__(self):
        if not 0.0 <= float(self.lam) <= 1.0:
            raise InvalidArgument(f"fusion weight must lie in [0, 1], got {self.lam}")


def raw_features(cloud: PointCloud) -> FeatureMatrix:
    if len(cloud) == 0:
        raise EmptyInput("cannot compute features of an empty cloud")
    return FeatureMatrix(cloud.points.copy(), "raw")


def pair_features(p1, n1, p2, n2):
    """Darboux-frame angles ``(theta, alpha, phi)`` for point pairs.

    Works on broadcastable ``(..., 3)`` arrays. The source of the frame is
    whichever endpoint's normal makes the smaller angle with the connecting
    line. Coincident points, or a connecting line parallel to the source
    normal, yield all-zero features.
    """
    dp = p2 - p1
    dist = np.linalg.norm(dp, axis=-1)
    zero = dist == 0.0
    safe = np.where(zero, 1.0, dist)
    a1 = np.einsum("...i,...i->...", n1, dp) / safe
    a2 = np.einsum("...i,...i->...", n2, dp) / safe
    # Near-ties (e.g. neighbours sharing one normal) keep p1 as the source so
    # the choice does not depend on rounding in a particular frame.
    swap = (np.abs(a1) < np.abs(a2) - SWAP_TOL)[..., None]
    src_n = np.where(swap, n2, n1)
    tgt_n = np.where(swap, n1, n2)
    dp = np.where(swap, -dp, dp)
    phi = np.where(swap[..., 0], -a2, a1)
    v = np.cross(dp, src_n)
    vnorm = np.linalg.norm(v, axis=-1)
    bad = zero | (vnorm == 0.0)
    v = v / np.where(bad, 1.0, vnorm)[..., None]
    w = np.cross(src_n, v)
    alpha = np.einsum("...i,...i->...", v, tgt_n)
    theta = np.arctan2(np.einsum("...i,...i->...", w, tgt_n),
                       np.einsum("...i,...i->...", src_n, tgt_n))
    theta = np.where(bad, 0.0, theta)
    alpha = np.where(bad, 0.0, alpha)
    phi = np.where(bad, 0.0, phi)
    return theta, alpha, phi


def _bin_angles(theta, alpha, phi):
    b0 = np.floor(FPFH_BINS * (theta + np.pi) / (2.0 * np.pi)).astype(np.int64)
    b1 = np.floor(FPFH_BINS * (alpha + 1.0) * 0.5).astype(np.int64)
    b2 = np.floor(FPFH_BINS * (phi + 1.0) * 0.5).astype(np.int64)
    top = FPFH_BINS - 1
    return (np.clip(b0, 0, top),
            np.clip(b1, 0, top) + FPFH_BINS,
            np.clip(b2, 0, top) + 2 * FPFH_BINS)


def _neighbour_pairs(tree: cKDTree, pts, centers, radius):
    """Directed ``(owner, neighbour)`` pairs within ``radius``, self excluded."""
    if centers is None:
        und = tree.query_pairs(radius, output_type="ndarray")
        if und.size == 0:
            return np.empty(0, np.int64), np.empty(0, np.int64)
        own = np.concatenate([und[:, 0], und[:, 1]])
        nbr = np.concatenate([und[:, 1], und[:, 0]])
        return own.astype(np.int64), nbr.astype(np.int64)
    hits = tree.query_ball_point(pts[centers], radius)
    lens = np.fromiter((len(h) for h in hits), dtype=np.int64, count=len(hits))
    own = np.repeat(centers, lens)
    nbr = np.fromiter((j for h in hits for j in h), dtype=np.int64, count=int(lens.sum()))
    keep = own != nbr
    return own[keep], nbr[keep]


def _normalise_blocks(hist: NDArray) -> NDArray:
    blocks = hist.reshape(hist.shape[0], 3, FPFH_BINS)
    sums = blocks.sum(axis=2, keepdims=True)
    blocks = np.divide(blocks * 100.0, sums, out=np.zeros_like(blocks), where=sums > 0)
    return blocks.reshape(hist.shape[0], FPFH_DIM)


def fpfh_features(cloud: PointCloud, radius: float,
                  query_indices: Optional[ArrayLike] = None) -> FeatureMatrix:
    """33-bin Fast Point Feature Histograms.

    SPFH of a point bins the pair angles to every neighbour within
    ``radius`` (11 bins per angle, each neighbour adding ``100 / k``). The
    FPFH adds the ``1/distance``-weighted mean of the neighbours' SPFH, and
    each 11-bin block is rescaled to sum to 100.

    ``query_indices`` restricts the output rows to those points; only the
    SPFH histograms they depend on are computed.
    """
    if not cloud.has_normals:
        raise InvalidArgument("FPFH needs a cloud with normals")
    if not radius > 0:
        raise InvalidArgument("FPFH radius must be positive")
    n = len(cloud)
    if n == 0:
        raise EmptyInput("cannot compute features of an empty cloud")
    pts, nrm = cloud.points, cloud.normals
    tree = cKDTree(pts)

    if query_indices is None:
        queries = np.arange(n, dtype=np.int64)
        own, nbr = _neighbour_pairs(tree, pts, None, radius)
        spfh_own, spfh_nbr = own, nbr
    else:
        queries = np.asarray(query_indices, dtype=np.int64)
        own, nbr = _neighbour_pairs(tree, pts, np.unique(queries), radius)
        support = np.unique(np.concatenate([own, nbr, queries]))
        spfh_own, spfh_nbr = _neighbour_pairs(tree, pts, support, radius)

    counts = np.bincount(spfh_own, minlength=n)
    isolated_all = counts < 2
    theta, alpha, phi = pair_features(pts[spfh_own], nrm[spfh_own], pts[spfh_nbr], nrm[spfh_nbr])
    incr = np.where(isolated_all, 0.0, 100.0 / np.maximum(counts, 1))[spfh_own]
    spfh = np.zeros(n * FPFH_DIM)
    for b in _bin_angles(theta, alpha, phi):
        spfh += np.bincount(spfh_own * FPFH_DIM + b, weights=incr, minlength=n * FPFH_DIM)
    spfh = spfh.reshape(n, FPFH_DIM)

    # Weighted neighbour aggregation for the query rows only.
    dist = np.linalg.norm(pts[nbr] - pts[own], axis=1)
    ok = dist > 0
    own, nbr, dist = own[ok], nbr[ok], dist[ok]
    k = np.bincount(own, minlength=n).astype(np.float64)
    agg = np.zeros((n, FPFH_DIM))
    np.add.at(agg, own, spfh[nbr] / dist[:, None])
    agg = np.divide(agg, k[:, None], out=np.zeros_like(agg), where=k[:, None] > 0)

    rows = _normalise_blocks(spfh[queries] + agg[queries])
    isolated = isolated_all[queries]
    rows[isolated] = 0.0
    return FeatureMatrix(rows, "fpfh", isolated)


def normalize_scores(scores: ArrayLike) -> NDArray[np.float64]:
    """Min-max rescale to [0, 1]; a constant vector maps to zeros."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        return s.copy()
    lo, hi = float(s.min()), float(s.max())
    if hi - lo <= 0.0:
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)


def fuse_scores(raw_scores: ArrayLike, fpfh_scores: ArrayLike, weights=0.01,
                normalize: bool = True) -> NDArray[np.float64]:
    """Convex combination ``lam * raw + (1 - lam) * fpfh``.

    With ``normalize`` each input is min-max rescaled over the cloud first.
    """
    raw = np.asarray(raw_scores, dtype=np.float64)
    fp = np.asarray(fpfh_scores, dtype=np.float64)
    if raw.shape != fp.shape:
        raise InvalidArgument(f"score length mismatch: {raw.shape} vs {fp.shape}")
    if not isinstance(weights, FusionWeights):
        weights = FusionWeights(float(weights))
    if normalize:
        raw, fp = normalize_scores(raw), normalize_scores(fp)
    lam = float(weights.lam)
    return lam * raw + (1.0 - lam) * fp

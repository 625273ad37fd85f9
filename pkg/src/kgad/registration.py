"""Coarse-to-fine rigid registration: FPFH + RANSAC, then point-to-plane ICP."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .descriptors import FeatureMatrix, fpfh_features
from .exceptions import DegenerateCorrespondences, EmptyInput, InvalidArgument, NoOverlap
from .geometry import (
    PointCloud,
    RigidTransform,
    downsample_indices,
    estimate_normals,
    mean_spacing,
    orthonormalize,
    rotvec_to_matrix,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """``pairs[:, 0]`` index the source, ``pairs[:, 1]`` the target."""

    pairs: NDArray[np.int64]

    def __post_init__(self):
        p = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if len(np.unique(p[:, 0])) != len(p):
            raise InvalidArgument("duplicate source index in correspondences")
        object.__setattr__(self, "pairs", p)

    def __len__(self) -> int:
        return self.pairs.shape[0]

    @property
    def src(self) -> NDArray[np.int64]:
        return self.pairs[:, 0]

    @property
    def dst(self) -> NDArray[np.int64]:
        return self.pairs[:, 1]


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    transform: RigidTransform
    fitness: float
    inlier_rmse: float
    converged: bool
    iterations: int = 0
    loss_history: tuple = ()
    stages: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.fitness <= 1.0) or self.inlier_rmse < 0:
            raise InvalidArgument("fitness must be in [0, 1] and rmse non-negative")


@dataclass
class RegistrationConfig:
    working_points: int = 20000
    feature_points: int = 3000
    normal_k: int = 30
    fpfh_radius_factor: float = 5.0
    mutual_filter: bool = False
    ransac_iters: int = 100000
    ransac_confidence: float = 0.999
    inlier_factor: float = 1.5
    edge_ratio: float = 0.9
    icp_max_iters: int = 50
    icp_corr_factor: float = 3.0
    icp_tol: float = 1e-6
    seed: int = 0


def match_fpfh(src_feats: FeatureMatrix, dst_feats: FeatureMatrix, mutual: bool = False) -> CorrespondenceSet:
    """Nearest destination row (L2) for every source row."""
    if len(src_feats) == 0 or len(dst_feats) == 0:
        raise EmptyInput("cannot match empty feature sets")
    if src_feats.dim != dst_feats.dim:
        raise InvalidArgument("feature dimensions differ")
    _, fwd = cKDTree(dst_feats.rows).query(src_feats.rows, k=1)
    src = np.arange(len(src_feats), dtype=np.int64)
    if mutual:
        _, back = cKDTree(src_feats.rows).query(dst_feats.rows, k=1)
        keep = back[fwd] == src
        src, fwd = src[keep], fwd[keep]
    return CorrespondenceSet(np.column_stack([src, fwd]))


def kabsch(src: NDArray, dst: NDArray) -> RigidTransform:
    """Least-squares rigid motion mapping ``src[i]`` onto ``dst[i]``."""
    R, t = _kabsch_batch(np.asarray(src, float)[None], np.asarray(dst, float)[None])
    return RigidTransform(orthonormalize(R[0]), t[0])


def _kabsch_batch(P: NDArray, Q: NDArray):
    cp = P.mean(axis=1, keepdims=True)
    cq = Q.mean(axis=1, keepdims=True)
    H = np.einsum("bki,bkj->bij", P - cp, Q - cq)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.einsum("bji,bkj->bik", Vt, U)))
    d[d == 0] = 1.0
    Vt = Vt.copy()
    Vt[:, 2, :] *= d[:, None]
    R = np.einsum("bji,bkj->bik", Vt, U)
    t = cq[:, 0, :] - np.einsum("bij,bj->bi", R, cp[:, 0, :])
    return R, t


def _score_hypotheses(R, t, P, Q, thresh2):
    moved = np.einsum("bij,nj->bni", R, P) + t[:, None, :]
    d2 = np.sum((moved - Q[None]) ** 2, axis=2)
    inl = d2 < thresh2
    cnt = inl.sum(axis=1)
    sse = np.where(inl, d2, 0.0).sum(axis=1)
    rmse = np.sqrt(sse / np.maximum(cnt, 1))
    return cnt, rmse


def ransac_global(src: PointCloud, dst: PointCloud, corr: CorrespondenceSet, iters: int = 100000,
                  inlier_thresh: float = 0.01, seed: int = 0, confidence: float = 0.999,
                  edge_ratio: float = 0.9, batch: int = 512) -> RegistrationResult:
    """RANSAC over 3-point correspondence triplets with Kabsch hypotheses.

    Triplets failing the edge-length similarity test or that are collinear
    are skipped before solving. The best hypothesis (most inliers, then
    lowest RMSE, then earliest draw) is re-fit on all its inliers.
    """
    if len(corr) < 3:
        raise DegenerateCorrespondences("RANSAC needs at least 3 correspondences")
    if inlier_thresh <= 0:
        raise InvalidArgument("inlier threshold must be positive")
    P = src.points[corr.src]
    Q = dst.points[corr.dst]
    nc = len(corr)
    thresh2 = inlier_thresh ** 2
    scale2 = max(np.ptp(P, axis=0).max(), np.ptp(Q, axis=0).max()) ** 2
    rng = np.random.default_rng(seed)

    best_cnt, best_rmse, best_R, best_t = -1, np.inf, None, None
    drawn, needed = 0, iters
    while drawn < needed:
        b = min(batch, needed - drawn)
        tri = rng.integers(0, nc, size=(b, 3))
        drawn += b
        ps, qs = P[tri], Q[tri]
        ok = (tri[:, 0] != tri[:, 1]) & (tri[:, 1] != tri[:, 2]) & (tri[:, 0] != tri[:, 2])
        for a, c in ((0, 1), (1, 2), (0, 2)):
            ls = np.linalg.norm(ps[:, a] - ps[:, c], axis=1)
            ld = np.linalg.norm(qs[:, a] - qs[:, c], axis=1)
            ok &= np.minimum(ls, ld) >= edge_ratio * np.maximum(ls, ld)
        for pts in (ps, qs):
            area = np.linalg.norm(np.cross(pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0]), axis=1)
            ok &= area > 1e-12 * scale2
        if not ok.any():
            continue
        R, t = _kabsch_batch(ps[ok], qs[ok])
        cnt, rmse = _score_hypotheses(R, t, P, Q, thresh2)
        # lexsort: first draw wins among equal (count, rmse)
        order = np.lexsort((rmse, -cnt))
        j = order[0]
        if cnt[j] > best_cnt or (cnt[j] == best_cnt and rmse[j] < best_rmse):
            best_cnt, best_rmse, best_R, best_t = int(cnt[j]), float(rmse[j]), R[j], t[j]
            w = best_cnt / nc
            if w >= 1.0:
                needed = drawn
            elif w > 0:
                est = math.log(1.0 - confidence) / math.log(1.0 - w ** 3)
                needed = min(iters, max(drawn, int(math.ceil(est))))
    if best_R is None:
        raise DegenerateCorrespondences("every sampled triplet was degenerate")

    d2 = np.sum((P @ best_R.T + best_t - Q) ** 2, axis=1)
    inl = d2 < thresh2
    T = kabsch(P[inl], Q[inl]) if inl.sum() >= 3 else RigidTransform(orthonormalize(best_R), best_t)
    d2 = np.sum((T.apply(P) - Q) ** 2, axis=1)
    inl = d2 < thresh2
    rmse = float(np.sqrt(d2[inl].mean())) if inl.any() else 0.0
    return RegistrationResult(T, float(inl.mean()), rmse, True, drawn)


def _icp_state(T, src_pts, tree, dst_pts, dst_nrm, max_dist):
    moved = T.apply(src_pts)
    d, j = tree.query(moved, k=1, distance_upper_bound=max_dist)
    valid = np.isfinite(d)
    j = np.where(valid, j, 0)
    r = np.einsum("ij,ij->i", dst_nrm[j], moved - dst_pts[j])
    gated = np.where(valid, r * r, max_dist * max_dist)
    return float(gated.sum()), valid, moved, j, r, d


def point_to_plane_loss(src: PointCloud, dst: PointCloud, transform: RigidTransform,
                        max_corr_dist: float) -> float:
    """Sum of squared plane residuals over nearest-neighbour correspondences
    inside the gate; unmatched source points contribute ``max_corr_dist ** 2``."""
    tree = cKDTree(dst.points)
    return _icp_state(transform, src.points, tree, dst.points, dst.normals, max_corr_dist)[0]


def icp_point_to_plane(src: PointCloud, dst: PointCloud, init: Optional[RigidTransform] = None,
                       max_iters: int = 50, max_corr_dist: float = 0.05, tol: float = 1e-6,
                       tree: Optional[cKDTree] = None) -> RegistrationResult:
    """Point-to-plane ICP with a small-angle Gauss-Newton step per iteration.

    A step is accepted only if it does not increase the gated loss (see
    :func:`point_to_plane_loss`); otherwise it is halved, up to 8 times.
    ``loss_history`` is therefore non-increasing.
    """
    if not dst.has_normals:
        raise InvalidArgument("point-to-plane ICP needs target normals")
    if max_corr_dist <= 0:
        raise InvalidArgument("max_corr_dist must be positive")
    T = RigidTransform.identity() if init is None else init
    tree = cKDTree(dst.points) if tree is None else tree
    sp, dp, dn = src.points, dst.points, dst.normals
    loss, valid, moved, j, r, d = _icp_state(T, sp, tree, dp, dn, max_corr_dist)
    if not valid.any():
        raise NoOverlap("no correspondences within max_corr_dist")
    history = [loss]
    converged = loss <= 1e-300
    it = 0
    while not converged and it < max_iters:
        it += 1
        m, nrm = moved[valid], dn[j[valid]]
        c = m.mean(axis=0)
        A = np.hstack([np.cross(m - c, nrm), nrm])
        b = -r[valid]
        AtA, Atb = A.T @ A, A.T @ b
        if np.linalg.cond(AtA) > 1e10:
            x = np.linalg.lstsq(A, b, rcond=None)[0]
        else:
            x = np.linalg.solve(AtA, Atb)
        accepted = False
        step = 1.0
        for _ in range(8):
            Rs = rotvec_to_matrix(step * x[:3])
            dT = RigidTransform(Rs, c - Rs @ c + step * x[3:])
            cand = dT @ T
            state = _icp_state(cand, sp, tree, dp, dn, max_corr_dist)
            if state[0] <= loss:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        prev = loss
        T = cand
        loss, valid, moved, j, r, d = state
        if not valid.any():
            raise NoOverlap("correspondences vanished during ICP")
        history.append(loss)
        if prev - loss <= tol * max(prev, 1e-300):
            converged = True
    rmse = float(np.sqrt(np.mean(d[valid] ** 2)))
    return RegistrationResult(T, float(valid.mean()), rmse, converged, it, tuple(history))


class RegistrationTarget:
    """A destination cloud with its downsampled, feature-annotated levels.

    Building this once lets many sources register to the same target
    without recomputing target normals and descriptors.
    """

    def __init__(self, cloud: PointCloud, cfg: Optional[RegistrationConfig] = None):
        cfg = cfg or RegistrationConfig()
        if len(cloud) == 0:
            raise EmptyInput("registration target is empty")
        self.cfg = cfg
        w_idx = downsample_indices(cloud, cfg.working_points, "fs", cfg.seed)
        working = cloud.subset(w_idx)
        if not working.has_normals:
            working = _with_normals(working, cfg.normal_k)
        self.working = working
        self.working_spacing = mean_spacing(working)
        f_idx = downsample_indices(working, cfg.feature_points, "fs", cfg.seed)
        coarse = _with_normals(working.subset(f_idx).with_normals(None), cfg.normal_k)
        self.coarse = coarse
        self.coarse_spacing = mean_spacing(coarse)
        self.fpfh_radius = cfg.fpfh_radius_factor * self.coarse_spacing
        self.coarse_features = fpfh_features(coarse, self.fpfh_radius)
        self.working_tree = cKDTree(working.points)
        self.coarse_tree = cKDTree(coarse.points)


def _with_normals(cloud: PointCloud, k: int) -> PointCloud:
    k = max(3, min(k, len(cloud) - 1))
    return estimate_normals(cloud, k=k)


def register(src: PointCloud, dst: Union[PointCloud, RegistrationTarget],
             cfg: Optional[RegistrationConfig] = None) -> RegistrationResult:
    """Estimate the rigid motion taking ``src`` into the frame of ``dst``.

    Downsample, estimate normals, FPFH, match, RANSAC; then ICP on the
    coarse level and again on the working level. A failed RANSAC is retried
    once with a doubled inlier threshold.
    """
    if len(src) == 0:
        raise EmptyInput("registration source is empty")
    target = dst if isinstance(dst, RegistrationTarget) else RegistrationTarget(dst, cfg)
    cfg = cfg or target.cfg
    if len(src) <= 3 or len(target.working) <= 3:
        raise EmptyInput("clouds too small to register")
    w_idx = downsample_indices(src, cfg.working_points, "fs", cfg.seed)
    s_work = src.subset(w_idx).with_normals(None)
    f_idx = downsample_indices(s_work, cfg.feature_points, "fs", cfg.seed)
    s_coarse = _with_normals(s_work.subset(f_idx), cfg.normal_k)
    s_feats = fpfh_features(s_coarse, target.fpfh_radius)
    corr = match_fpfh(s_feats, target.coarse_features, mutual=cfg.mutual_filter)

    thresh = cfg.inlier_factor * target.coarse_spacing
    try:
        coarse = ransac_global(s_coarse, target.coarse, corr, cfg.ransac_iters, thresh,
                               cfg.seed, cfg.ransac_confidence, cfg.edge_ratio)
    except DegenerateCorrespondences:
        logger.info("RANSAC failed; retrying with inlier threshold %.4g", 2 * thresh)
        coarse = ransac_global(s_coarse, target.coarse, corr, cfg.ransac_iters, 2 * thresh,
                               cfg.seed, cfg.ransac_confidence, cfg.edge_ratio)

    mid = icp_point_to_plane(s_coarse, target.coarse, coarse.transform, cfg.icp_max_iters,
                             cfg.icp_corr_factor * target.coarse_spacing, cfg.icp_tol,
                             tree=target.coarse_tree)
    fine = icp_point_to_plane(s_work, target.working, mid.transform, cfg.icp_max_iters,
                              cfg.icp_corr_factor * target.working_spacing, cfg.icp_tol,
                              tree=target.working_tree)
    stages = {
        "ransac": {"fitness": coarse.fitness, "rmse": coarse.inlier_rmse,
                   "draws": coarse.iterations, "correspondences": len(corr)},
        "icp_coarse": {"fitness": mid.fitness, "rmse": mid.inlier_rmse, "iterations": mid.iterations},
        "icp_fine": {"fitness": fine.fitness, "rmse": fine.inlier_rmse, "iterations": fine.iterations},
    }
    return RegistrationResult(fine.transform, fine.fitness, fine.inlier_rmse, fine.converged,
                              fine.iterations, fine.loss_history, stages)

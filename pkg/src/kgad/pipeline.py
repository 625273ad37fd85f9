"""Reference model construction and test-time scoring."""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import logsumexp

from .config import RunConfig
from .descriptors import FeatureMatrix, fpfh_features, fuse_scores, raw_features
from .exceptions import EmptyInput, InvalidArgument, InvalidState, KgadError, RegistrationFailed
from .geometry import (
    PointCloud,
    RigidTransform,
    SpatialIndex,
    downsample_indices,
    estimate_normals,
    mean_spacing,
)
from .keypoints import KeypointSet, select_centroids
from .registration import RegistrationResult, RegistrationTarget, register

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusterDiagnostics:
    count: int
    min: float
    max: float


@dataclass(frozen=True, eq=False)
class ReferenceModel:
    """Per-cluster comparison banks built from registered prototypes.

    ``cluster_sources[j]`` holds the prototype id of every row of cluster j.
    ``score_scale`` is a typical nearest-neighbour distance inside the banks,
    one per feature kind, used to put fused kinds on a common scale.
    """

    base_cloud: PointCloud
    centroids: KeypointSet
    clusters: tuple
    cluster_features: Mapping[str, tuple]
    config: RunConfig
    fpfh_radius: float
    score_scale: Mapping[str, float]
    cluster_sources: tuple
    registrations: tuple = ()
    cluster_indices: Dict[str, tuple] = field(init=False, repr=False)
    _target: list = field(init=False, repr=False, default_factory=list)
    _lock: threading.Lock = field(init=False, repr=False, default_factory=threading.Lock)

    def __post_init__(self):
        m = len(self.centroids)
        if len(self.clusters) != m or len(self.cluster_sources) != m:
            raise InvalidState("cluster count does not match centroid count")
        indices = {}
        for kind, feats in self.cluster_features.items():
            if len(feats) != m:
                raise InvalidState(f"{kind} features do not cover every cluster")
            for c, f in zip(self.clusters, feats):
                if len(c) != len(f):
                    raise InvalidState(f"{kind} feature rows do not match cluster points")
            indices[kind] = tuple(SpatialIndex(f.rows) if len(f) else None for f in feats)
        object.__setattr__(self, "cluster_indices", indices)

    @property
    def feature_kinds(self) -> tuple:
        return tuple(self.cluster_features)

    @property
    def n_clusters(self) -> int:
        return len(self.centroids)

    def cluster_sizes(self) -> List[int]:
        return [len(c) for c in self.clusters]

    def registration_target(self) -> RegistrationTarget:
        """The base cloud prepared for registration, built once on first use."""
        with self._lock:
            if not self._target:
                self._target.append(RegistrationTarget(self.base_cloud, self.config.registration_config()))
            return self._target[0]


@dataclass(frozen=True, eq=False)
class PointScores:
    scores: NDArray[np.float64]
    nn_dist: NDArray[np.float64]
    weights: NDArray[np.float64]
    fallback: NDArray[np.bool_]


@dataclass(frozen=True, eq=False)
class AnomalyResult:
    """Scores for one test cloud.

    ``point_scores`` follows the order of the input cloud; the working
    arrays describe the downsampled subset (``working_indices`` into the
    input) on which nearest-neighbour scoring ran.
    """

    point_scores: NDArray[np.float64]
    object_score: float
    per_cluster_diagnostics: Dict[int, ClusterDiagnostics]
    aggregation: str
    object_scores: Dict[str, float]
    working_indices: NDArray[np.int64]
    working_labels: NDArray[np.int64]
    working_scores: NDArray[np.float64]
    kind_scores: Dict[str, NDArray[np.float64]]
    transform: RigidTransform
    fitness: float
    low_fitness: bool = False
    registration_failed: bool = False
    fallback_clusters: tuple = ()
    timings: Dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "n_points": int(self.point_scores.shape[0]),
            "object_score": self.object_score,
            "aggregation": self.aggregation,
            "object_scores": dict(self.object_scores),
            "fitness": self.fitness,
            "low_fitness": self.low_fitness,
            "registration_failed": self.registration_failed,
            "clusters": {str(j): {"count": d.count, "min": d.min, "max": d.max}
                         for j, d in self.per_cluster_diagnostics.items()},
            "timings": dict(self.timings),
        }


def _centroid_positions(centroids) -> NDArray[np.float64]:
    if isinstance(centroids, KeypointSet):
        return centroids.positions
    pos = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    if pos.shape[0] == 0:
        raise InvalidArgument("need at least one centroid")
    return pos


def assign_clusters(cloud, centroids) -> NDArray[np.int64]:
    """Index of the nearest centroid for every point; ties go to the lowest index."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    cen = _centroid_positions(centroids)
    if pts.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    # Few centroids: a dense distance table is cheap and argmin breaks ties low.
    out = np.empty(pts.shape[0], dtype=np.int64)
    step = 65536
    for s in range(0, pts.shape[0], step):
        block = pts[s:s + step]
        d2 = ((block[:, None, :] - cen[None, :, :]) ** 2).sum(axis=2)
        out[s:s + step] = np.argmin(d2, axis=1)
    return out


def _normal_cloud(cloud: PointCloud, k: int) -> PointCloud:
    return estimate_normals(cloud.with_normals(None), k=max(3, min(k, len(cloud) - 1)))


def _reference_scale(feats: Sequence[FeatureMatrix]) -> float:
    """Median distance from a bank row to its nearest other row."""
    dists = []
    for f in feats:
        if len(f) < 2:
            continue
        d, _ = SpatialIndex(f.rows).knn(f.rows, 2)
        dists.append(d[:, 1])
    if not dists:
        return 1.0
    d = np.concatenate(dists)
    pos = d[d > 0]
    if pos.size == 0:
        return 1.0
    med = float(np.median(d))
    return med if med > 0 else float(pos.mean())


def _detector_params(cfg: RunConfig, spacing: float) -> dict:
    if cfg.detector == "iss":
        return {"salient_radius": cfg.iss_salient_factor * spacing,
                "nms_radius": cfg.iss_nms_factor * spacing,
                "gamma21": cfg.iss_gamma21, "gamma32": cfg.iss_gamma32}
    if cfg.detector == "harris3d":
        return {"radius": cfg.iss_salient_factor * spacing, "nms_radius": cfg.iss_nms_factor * spacing,
                "k_harris": cfg.harris_k, "threshold": cfg.harris_threshold,
                "percentile": cfg.harris_percentile}
    return {}


def prepare_base(prototypes: Sequence[PointCloud], cfg: RunConfig) -> PointCloud:
    """The base prototype at working resolution with estimated normals."""
    base = prototypes[cfg.base_index]
    idx = downsample_indices(base, cfg.prototype_points, "fs", cfg.seed)
    return _normal_cloud(base.subset(idx), cfg.normal_k)


def build_reference(prototypes: Sequence[PointCloud], cfg: Optional[RunConfig] = None,
                    prototype_registrations: Optional[Mapping[int, RegistrationResult]] = None
                    ) -> ReferenceModel:
    """Build the per-cluster reference banks from defect-free prototypes.

    The base prototype is downsampled, its keypoints are reduced to the
    cluster centroids, every other prototype is registered onto it, and all
    registered points are split by nearest centroid. Each merged cluster is
    reduced to ``cfg.cluster_size`` rows by farthest point sampling.

    ``prototype_registrations`` may supply precomputed alignments (keyed by
    prototype index) onto the base cloud of the same configuration.
    """
    cfg = cfg or RunConfig()
    protos = list(prototypes)
    if not protos:
        raise EmptyInput("need at least one prototype")
    if cfg.base_index >= len(protos):
        raise InvalidArgument(f"base_index {cfg.base_index} out of range for {len(protos)} prototypes")
    for i, p in enumerate(protos):
        if len(p) <= max(3, cfg.normal_k // 3):
            raise EmptyInput(f"prototype {i} has too few points ({len(p)})")
    kinds = cfg.feature_kinds

    def working(i: int) -> PointCloud:
        idx = downsample_indices(protos[i], cfg.prototype_points, "fs", cfg.seed)
        return protos[i].subset(idx).with_normals(None)

    base = prepare_base(protos, cfg)
    spacing = mean_spacing(base)
    centroids = select_centroids(base, cfg.detector, cfg.num_keypoints, cfg.sampling, cfg.seed,
                                 **_detector_params(cfg, spacing))
    fpfh_radius = cfg.fpfh_radius_factor * spacing

    others = [i for i in range(len(protos)) if i != cfg.base_index]
    reg_cfg = cfg.registration_config()
    target = RegistrationTarget(base, reg_cfg) if any(i not in (prototype_registrations or {}) for i in others) else None

    known = dict(prototype_registrations or {})

    def align(i: int):
        if i in known:
            return known[i]
        try:
            res = register(protos[i], target, reg_cfg)
        except KgadError as exc:
            raise RegistrationFailed(f"prototype {i} failed to register: {exc}", prototype_id=i) from exc
        if res.fitness < cfg.min_fitness:
            raise RegistrationFailed(f"prototype {i} registered with fitness {res.fitness:.3f} "
                                     f"< {cfg.min_fitness}", prototype_id=i)
        return res

    if cfg.n_jobs > 1 and len(others) > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_jobs) as pool:
            results = list(pool.map(align, others))
    else:
        results = [align(i) for i in others]

    aligned = {cfg.base_index: base}
    diagnostics = {cfg.base_index: {"prototype": cfg.base_index, "fitness": 1.0, "rmse": 0.0, "base": True}}
    for i, res in zip(others, results):
        aligned[i] = _normal_cloud(working(i).transformed(res.transform), cfg.normal_k)
        diagnostics[i] = {"prototype": i, "fitness": res.fitness, "rmse": res.inlier_rmse, "base": False}
        logger.info("prototype %d registered: fitness %.3f rmse %.4g", i, res.fitness, res.inlier_rmse)

    m = len(centroids)
    pooled_pts = [[] for _ in range(m)]
    pooled_src = [[] for _ in range(m)]
    pooled_feat = {k: [[] for _ in range(m)] for k in kinds}
    for i in range(len(protos)):
        cloud = aligned[i]
        labels = assign_clusters(cloud, centroids)
        feats = {}
        if "raw" in kinds:
            feats["raw"] = raw_features(cloud).rows
        if "fpfh" in kinds:
            feats["fpfh"] = fpfh_features(cloud, fpfh_radius).rows
        for j in range(m):
            sel = np.flatnonzero(labels == j)
            pooled_pts[j].append(cloud.points[sel])
            pooled_src[j].append(np.full(sel.size, i, dtype=np.int64))
            for k in kinds:
                pooled_feat[k][j].append(feats[k][sel])

    clusters, sources = [], []
    features = {k: [] for k in kinds}
    for j in range(m):
        pts = np.concatenate(pooled_pts[j])
        src = np.concatenate(pooled_src[j])
        keep = np.arange(pts.shape[0])
        if pts.shape[0] > cfg.cluster_size:
            keep = np.sort(downsample_indices(pts, cfg.cluster_size, "fs", cfg.seed + j))
        if keep.size == 0:
            logger.warning("reference cluster %d is empty", j)
        clusters.append(PointCloud(pts[keep]))
        sources.append(src[keep])
        for k in kinds:
            rows = np.concatenate(pooled_feat[k][j]) if pts.shape[0] else np.zeros((0, 3 if k == "raw" else 33))
            features[k].append(FeatureMatrix(rows[keep], k))

    scale = {k: _reference_scale(features[k]) for k in kinds}
    model = ReferenceModel(
        base_cloud=base,
        centroids=centroids,
        clusters=tuple(clusters),
        cluster_features={k: tuple(v) for k, v in features.items()},
        config=cfg,
        fpfh_radius=float(fpfh_radius),
        score_scale=scale,
        cluster_sources=tuple(sources),
        registrations=tuple(diagnostics[i] for i in range(len(protos))),
    )
    if target is not None:
        model._target.append(target)
    return model


def _nearest_nonempty(model: ReferenceModel, kind: str) -> NDArray[np.int64]:
    """For every cluster, itself if its bank is non-empty, otherwise the
    non-empty cluster whose centroid is closest."""
    banks = model.cluster_indices[kind]
    ok = np.array([b is not None for b in banks])
    if not ok.any():
        raise InvalidState("every reference cluster is empty")
    cen = model.centroids.positions
    d = np.linalg.norm(cen[:, None] - cen[None, ok], axis=2)
    return np.where(ok, np.arange(len(banks)), np.flatnonzero(ok)[np.argmin(d, axis=1)])


def score_points(test: PointCloud, model: ReferenceModel, kind: str, cfg: Optional[RunConfig] = None,
                 features: Optional[FeatureMatrix] = None,
                 labels: Optional[ArrayLike] = None) -> PointScores:
    """Reweighted nearest-neighbour scores of registered working points.

    For a point in cluster j, ``s*`` is the feature-space distance to the
    closest row of reference bank j and ``d_1..d_K`` the distances to its K
    closest rows. The weight is ``1 - exp(s*/Z) / sum_k exp(d_k/Z)`` clamped
    to [0, 1], with ``Z`` the number of test points in cluster j unless
    ``cfg.reweight_scale`` sets a fixed value. The score is ``w * s*``.
    """
    cfg = cfg or model.config
    if kind not in model.cluster_features:
        raise InvalidArgument(f"model has no {kind!r} features; available: {model.feature_kinds}")
    if features is None:
        if kind == "raw":
            features = raw_features(test)
        else:
            prepared = test if test.has_normals else _normal_cloud(test, cfg.normal_k)
            features = fpfh_features(prepared, model.fpfh_radius)
    rows = features.rows if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    labels = assign_clusters(test, model.centroids) if labels is None else np.asarray(labels, dtype=np.int64)
    n = rows.shape[0]
    if labels.shape[0] != n:
        raise InvalidArgument("labels and feature rows differ in length")

    owner = _nearest_nonempty(model, kind)
    banks = model.cluster_indices[kind]
    nn = np.zeros(n)
    w = np.zeros(n)
    fallback = np.zeros(n, dtype=bool)
    for j in np.unique(labels):
        sel = np.flatnonzero(labels == j)
        bank = banks[owner[j]]
        fallback[sel] = owner[j] != j
        K = min(cfg.reweight_k, len(bank))
        d, _ = bank.knn(rows[sel], K)
        z = cfg.reweight_scale if cfg.reweight_scale > 0 else float(sel.size)
        s_star = d[:, 0]
        # exp(s*/z) / sum_k exp(d_k/z), evaluated in log space.
        ratio = np.exp(s_star / z - logsumexp(d / z, axis=1))
        nn[sel] = s_star
        w[sel] = np.clip(1.0 - ratio, 0.0, 1.0)
    return PointScores(w * nn, nn, w, fallback)


def interpolate_scores(full_test, working_test, working_scores: ArrayLike, k: int = 3,
                       full_labels: Optional[ArrayLike] = None,
                       working_labels: Optional[ArrayLike] = None) -> NDArray[np.float64]:
    """Mean score of the ``k`` nearest working points, searched within the
    point's own cluster when labels are given.

    A cluster with fewer than ``k`` working points uses all of them; a
    cluster with none falls back to the whole working set.
    """
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    full = full_test.points if isinstance(full_test, PointCloud) else np.asarray(full_test, dtype=np.float64)
    work = working_test.points if isinstance(working_test, PointCloud) else np.asarray(working_test, dtype=np.float64)
    scores = np.asarray(working_scores, dtype=np.float64)
    if scores.shape[0] != work.shape[0]:
        raise InvalidArgument("working scores and working points differ in length")
    if work.shape[0] == 0:
        raise EmptyInput("no working points to interpolate from")
    out = np.empty(full.shape[0])

    def mean_knn(targets, pool):
        d, idx = SpatialIndex(work[pool]).knn(full[targets], min(k, pool.size))
        out[targets] = scores[pool][idx].mean(axis=1)

    if full_labels is None or working_labels is None:
        mean_knn(np.arange(full.shape[0]), np.arange(work.shape[0]))
        return out
    fl = np.asarray(full_labels, dtype=np.int64)
    wl = np.asarray(working_labels, dtype=np.int64)
    everything = np.arange(work.shape[0])
    for j in np.unique(fl):
        targets = np.flatnonzero(fl == j)
        pool = np.flatnonzero(wl == j)
        mean_knn(targets, pool if pool.size else everything)
    return out


def group_by_cluster(scores: ArrayLike, labels: ArrayLike, n_clusters: Optional[int] = None) -> List[NDArray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    m = int(labels.max()) + 1 if n_clusters is None and labels.size else (n_clusters or 0)
    return [scores[labels == j] for j in range(m)]


def object_score(cluster_scores: Sequence[ArrayLike], aggregation: str = "eq14") -> float:
    """Object-level score from per-cluster point scores.

    ``"eq14"``: the largest of the per-cluster minima.
    ``"max"``: the largest point score overall.
    Empty clusters are ignored.
    """
    groups = [np.asarray(c, dtype=np.float64) for c in cluster_scores]
    groups = [g for g in groups if g.size]
    if not groups:
        raise InvalidState("all clusters are empty")
    if aggregation == "eq14":
        return float(max(g.min() for g in groups))
    if aggregation == "max":
        return float(max(g.max() for g in groups))
    raise InvalidArgument(f"unknown aggregation {aggregation!r}")


def _fuse(kind_scores: Dict[str, NDArray], model: ReferenceModel, cfg: RunConfig) -> NDArray:
    if len(kind_scores) == 1:
        return next(iter(kind_scores.values()))
    raw, fp = kind_scores["raw"], kind_scores["fpfh"]
    if cfg.fusion_normalize == "minmax":
        return fuse_scores(raw, fp, cfg.fusion_lambda, normalize=True)
    if cfg.fusion_normalize == "reference":
        raw = raw / model.score_scale["raw"]
        fp = fp / model.score_scale["fpfh"]
    return fuse_scores(raw, fp, cfg.fusion_lambda, normalize=False)


def register_test(test: PointCloud, model: ReferenceModel,
                  cfg: Optional[RunConfig] = None) -> RegistrationResult:
    cfg = cfg or model.config
    return register(test.with_normals(None), model.registration_target(), cfg.registration_config())


def _check_compatible(model: ReferenceModel, cfg: RunConfig) -> None:
    missing = [k for k in cfg.feature_kinds if k not in model.cluster_features]
    if missing:
        raise InvalidArgument(f"model was built without {missing} features")


def infer(test: PointCloud, model: ReferenceModel, cfg: Optional[RunConfig] = None,
          registration: Optional[RegistrationResult] = None) -> AnomalyResult:
    """Register, downsample, cluster, score, fuse, interpolate and aggregate.

    A precomputed ``registration`` of this test onto the model's base cloud
    skips the alignment step.
    """
    cfg = cfg or model.config
    _check_compatible(model, cfg)
    if len(test) == 0:
        raise EmptyInput("test cloud is empty")
    timings = {}
    t0 = time.perf_counter()
    test = test.with_normals(None)

    failed = False
    try:
        reg = registration or register_test(test, model, cfg)
        transform, fitness = reg.transform, reg.fitness
    except KgadError as exc:
        # Still score the sample: align centroids and flag it.
        logger.warning("registration failed (%s); falling back to centroid alignment", exc)
        failed = True
        transform = RigidTransform(np.eye(3), model.base_cloud.centroid() - test.centroid())
        fitness = 0.0
    low = fitness < cfg.min_fitness
    if low and not failed:
        logger.warning("registration fitness %.3f below %.3f; scoring anyway", fitness, cfg.min_fitness)
    aligned = test.transformed(transform)
    timings["registration"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    dense_idx = downsample_indices(aligned, cfg.prototype_points, "fs", cfg.seed)
    dense = aligned.subset(dense_idx)
    local = downsample_indices(dense, min(cfg.test_points, len(dense)), "fs", cfg.seed)
    working = dense.subset(local)
    w_labels = assign_clusters(working, model.centroids)
    kind_scores, fallback = {}, np.zeros(len(working), dtype=bool)
    for kind in cfg.feature_kinds:
        feats = None
        if kind == "fpfh":
            feats = fpfh_features(_normal_cloud(dense, cfg.normal_k), model.fpfh_radius, query_indices=local)
        ps = score_points(working, model, kind, cfg, features=feats, labels=w_labels)
        kind_scores[kind] = ps.scores
        fallback |= ps.fallback
    w_scores = _fuse(kind_scores, model, cfg)
    timings["scoring"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    full_labels = assign_clusters(aligned, model.centroids)
    point_scores = interpolate_scores(aligned, working, w_scores, cfg.interp_k, full_labels, w_labels)
    groups = group_by_cluster(w_scores, w_labels, model.n_clusters)
    diags = {j: ClusterDiagnostics(int(g.size), float(g.min()), float(g.max()))
             for j, g in enumerate(groups) if g.size}
    scores = {a: object_score(groups, a) for a in ("eq14", "max")}
    timings["interpolation"] = time.perf_counter() - t2
    timings["total"] = time.perf_counter() - t0

    return AnomalyResult(
        point_scores=point_scores,
        object_score=scores[cfg.aggregation],
        per_cluster_diagnostics=diags,
        aggregation=cfg.aggregation,
        object_scores=scores,
        working_indices=dense_idx[local],
        working_labels=w_labels,
        working_scores=w_scores,
        kind_scores=kind_scores,
        transform=transform,
        fitness=float(fitness),
        low_fitness=bool(low),
        registration_failed=failed,
        fallback_clusters=tuple(int(j) for j in np.unique(w_labels[fallback])),
        timings=timings,
    )

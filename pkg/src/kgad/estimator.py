"""scikit-learn style wrapper around the reference model."""

from __future__ import annotations

from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .exceptions import InvalidArgument, InvalidState
from .model_io import load_model, save_model
from .pipeline import AnomalyResult, build_reference, infer
from .validation import check_cloud, check_clouds


class KeypointGuidedDetector(BaseEstimator):
    """Unsupervised point cloud anomaly detector.

    ``fit`` takes defect-free prototype clouds; scoring methods take one
    cloud or a list of clouds. Keyword arguments not exposed here can be
    passed through ``options`` (any RunConfig field).

    Examples
    --------
    >>> det = KeypointGuidedDetector(features="raw").fit(prototypes)  # doctest: +SKIP
    >>> det.decision_function(tests)                                  # doctest: +SKIP
    """

    def __init__(self, prototype_points=20000, test_points=1000, num_keypoints=5,
                 detector="iss", sampling="fs", features="raw+fpfh", fusion_lambda=0.01,
                 reweight_k=3, interp_k=3, aggregation="eq14", cluster_size=4000,
                 base_index=0, threshold=None, random_state=0, n_jobs=1, options=None):
        self.prototype_points = prototype_points
        self.test_points = test_points
        self.num_keypoints = num_keypoints
        self.detector = detector
        self.sampling = sampling
        self.features = features
        self.fusion_lambda = fusion_lambda
        self.reweight_k = reweight_k
        self.interp_k = interp_k
        self.aggregation = aggregation
        self.cluster_size = cluster_size
        self.base_index = base_index
        self.threshold = threshold
        self.random_state = random_state
        self.n_jobs = n_jobs
        self.options = options

    def _run_config(self) -> RunConfig:
        values = dict(self.options or {})
        values.update(
            prototype_points=self.prototype_points, test_points=self.test_points,
            num_keypoints=self.num_keypoints, detector=self.detector, sampling=self.sampling,
            features=self.features, fusion_lambda=self.fusion_lambda, reweight_k=self.reweight_k,
            interp_k=self.interp_k, aggregation=self.aggregation, cluster_size=self.cluster_size,
            base_index=self.base_index, seed=0 if self.random_state is None else self.random_state,
            n_jobs=self.n_jobs,
        )
        return RunConfig.from_dict(values)

    def fit(self, X, y=None):
        """Build the reference model from prototype clouds. ``y`` is ignored."""
        clouds = check_clouds(X)
        self.config_ = self._run_config()
        self.model_ = build_reference(clouds, self.config_)
        self.n_prototypes_ = len(clouds)
        self.centroids_ = self.model_.centroids.positions.copy()
        return self

    def _infer_config(self) -> RunConfig:
        # Scoring-only parameters may change after fitting.
        return self.model_.config.replace(aggregation=self.aggregation, interp_k=self.interp_k,
                                          reweight_k=self.reweight_k, fusion_lambda=self.fusion_lambda,
                                          test_points=self.test_points)

    def infer(self, X) -> List[AnomalyResult]:
        check_is_fitted(self, "model_")
        cfg = self._infer_config()
        return [infer(c, self.model_, cfg) for c in check_clouds(X)]

    def score_samples(self, X) -> List[np.ndarray]:
        """Per-point anomaly scores, one array per input cloud."""
        return [r.point_scores for r in self.infer(X)]

    def transform(self, X) -> List[np.ndarray]:
        return self.score_samples(X)

    def decision_function(self, X) -> np.ndarray:
        """Object-level anomaly scores (higher is more anomalous)."""
        return np.array([r.object_score for r in self.infer(X)])

    def predict(self, X, threshold: Optional[float] = None) -> np.ndarray:
        """1 for clouds scoring above the threshold, else 0."""
        thr = self.threshold if threshold is None else threshold
        if thr is None:
            raise InvalidState("predict needs a threshold; set one on the estimator or pass it")
        return (self.decision_function(X) > float(thr)).astype(np.int64)

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_model(self.model_, path)

    @classmethod
    def load(cls, path, **params) -> "KeypointGuidedDetector":
        model = load_model(path)
        cfg = model.config
        known = {k: getattr(cfg, k) for k in ("prototype_points", "test_points", "num_keypoints",
                                               "detector", "sampling", "features", "fusion_lambda",
                                               "reweight_k", "interp_k", "aggregation", "cluster_size",
                                               "base_index", "n_jobs")}
        known["random_state"] = cfg.seed
        unknown = set(params) - set(cls._get_param_names())
        if unknown:
            raise InvalidArgument(f"unknown parameters {sorted(unknown)}")
        known.update(params)
        det = cls(**known)
        det.config_ = cfg
        det.model_ = model
        det.n_prototypes_ = len(model.registrations)
        det.centroids_ = model.centroids.positions.copy()
        return det


__all__ = ["KeypointGuidedDetector", "check_cloud", "check_clouds"]

"""Registration-based point cloud anomaly detection with keypoint-guided clustering."""

from .config import RunConfig
from .dataset import LabeledSample, load_sample, read_scores, save_sample, write_scores
from .descriptors import FeatureMatrix, FusionWeights, fpfh_features, fuse_scores, raw_features
from .estimator import KeypointGuidedDetector
from .exceptions import (
    DegenerateCorrespondences,
    EmptyInput,
    EmptyKeypoints,
    InvalidArgument,
    InvalidState,
    KgadError,
    NoOverlap,
    ParseError,
    RegistrationFailed,
    UndefinedMetric,
)
from .geometry import (
    PointCloud,
    RigidTransform,
    SpatialIndex,
    build_index,
    estimate_normals,
    farthest_point_sample,
)
from .keypoints import KeypointSet, detect_harris3d, detect_iss, select_centroids, subsample_keypoints
from .metrics import auroc, point_auroc
from .model_io import load_model, save_model
from .pipeline import (
    AnomalyResult,
    ReferenceModel,
    assign_clusters,
    build_reference,
    infer,
    interpolate_scores,
    object_score,
    score_points,
)
from .registration import RegistrationResult, icp_point_to_plane, ransac_global, register
from .synthetic import DefectSpec, inject_defect, synth_object
from .validation import check_cloud, check_clouds

__version__ = "0.1.0"

__all__ = [
    "AnomalyResult", "DefectSpec", "DegenerateCorrespondences", "EmptyInput", "EmptyKeypoints",
    "FeatureMatrix", "FusionWeights", "InvalidArgument", "InvalidState", "KeypointGuidedDetector",
    "KeypointSet", "KgadError", "LabeledSample", "NoOverlap", "ParseError", "PointCloud",
    "ReferenceModel", "RegistrationFailed", "RegistrationResult", "RigidTransform", "RunConfig",
    "SpatialIndex", "UndefinedMetric", "assign_clusters", "auroc", "build_index", "build_reference",
    "check_cloud", "check_clouds", "detect_harris3d", "detect_iss", "estimate_normals",
    "farthest_point_sample", "fpfh_features", "fuse_scores", "icp_point_to_plane", "infer",
    "inject_defect", "interpolate_scores", "load_model", "load_sample", "object_score", "point_auroc",
    "ransac_global", "raw_features", "read_scores", "register", "save_model", "save_sample",
    "score_points", "select_centroids", "subsample_keypoints", "synth_object", "write_scores",
]

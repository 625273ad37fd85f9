"""Run configuration and its INI-style file format."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .descriptors import FEATURE_KINDS
from .exceptions import InvalidArgument
from .geometry import SAMPLING_STRATEGIES
from .keypoints import DETECTORS
from .registration import RegistrationConfig

AGGREGATIONS = ("eq14", "max")
FUSION_NORMALIZATIONS = ("reference", "minmax", "none")
SECTION = "run"


@dataclass
class RunConfig:
    """Every hyperparameter of model building and inference.

    ``reweight_scale = 0`` normalizes the reweighting exponents by the
    test-cluster cardinality; a positive value is used as a fixed divisor.
    """

    prototype_points: int = 20000
    test_points: int = 1000
    num_keypoints: int = 5
    interp_k: int = 3
    fusion_lambda: float = 0.01
    reweight_k: int = 3
    reweight_scale: float = 0.0
    detector: str = "iss"
    sampling: str = "fs"
    features: str = "raw+fpfh"
    aggregation: str = "eq14"
    fusion_normalize: str = "reference"
    cluster_size: int = 4000
    base_index: int = 0
    seed: int = 0
    min_fitness: float = 0.3
    normal_k: int = 30
    fpfh_radius_factor: float = 5.0
    iss_salient_factor: float = 6.0
    iss_nms_factor: float = 4.0
    iss_gamma21: float = 0.975
    iss_gamma32: float = 0.975
    harris_k: float = 0.04
    harris_threshold: float = 0.0
    harris_percentile: float = 95.0
    feature_points: int = 3000
    ransac_iters: int = 100000
    ransac_confidence: float = 0.999
    inlier_factor: float = 1.5
    edge_ratio: float = 0.9
    mutual_filter: bool = False
    icp_max_iters: int = 50
    icp_corr_factor: float = 3.0
    icp_tol: float = 1e-6
    n_jobs: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("prototype_points", "test_points", "num_keypoints", "interp_k",
                     "reweight_k", "cluster_size", "normal_k", "feature_points",
                     "ransac_iters", "icp_max_iters", "n_jobs"):
            if int(getattr(self, name)) < 1:
                raise InvalidArgument(f"{name} must be >= 1")
        if not 0.0 <= self.fusion_lambda <= 1.0:
            raise InvalidArgument("fusion_lambda must lie in [0, 1]")
        if not 0.0 <= self.min_fitness <= 1.0:
            raise InvalidArgument("min_fitness must lie in [0, 1]")
        if self.reweight_scale < 0:
            raise InvalidArgument("reweight_scale must be >= 0")
        if self.base_index < 0:
            raise InvalidArgument("base_index must be >= 0")
        if self.detector not in DETECTORS:
            raise InvalidArgument(f"detector must be one of {DETECTORS}")
        if self.sampling not in SAMPLING_STRATEGIES:
            raise InvalidArgument(f"sampling must be one of {SAMPLING_STRATEGIES}")
        kinds = self.feature_kinds
        if not kinds or any(k not in FEATURE_KINDS for k in kinds) or len(set(kinds)) != len(kinds):
            raise InvalidArgument(f"features must be 'raw', 'fpfh' or 'raw+fpfh', got {self.features!r}")
        if self.aggregation not in AGGREGATIONS:
            raise InvalidArgument(f"aggregation must be one of {AGGREGATIONS}")
        if self.fusion_normalize not in FUSION_NORMALIZATIONS:
            raise InvalidArgument(f"fusion_normalize must be one of {FUSION_NORMALIZATIONS}")

    @property
    def feature_kinds(self) -> tuple:
        return tuple(k.strip() for k in self.features.lower().split("+") if k.strip())

    def registration_config(self) -> RegistrationConfig:
        return RegistrationConfig(
            working_points=self.prototype_points,
            feature_points=self.feature_points,
            normal_k=self.normal_k,
            fpfh_radius_factor=self.fpfh_radius_factor,
            mutual_filter=self.mutual_filter,
            ransac_iters=self.ransac_iters,
            ransac_confidence=self.ransac_confidence,
            inlier_factor=self.inlier_factor,
            edge_ratio=self.edge_ratio,
            icp_max_iters=self.icp_max_iters,
            icp_corr_factor=self.icp_corr_factor,
            icp_tol=self.icp_tol,
            seed=self.seed,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: _coerce(known[k], v) for k, v in values.items()})

    def dumps(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser[SECTION] = {k: _render(v) for k, v in self.to_dict().items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_string(text)
        if not parser.has_section(SECTION):
            raise InvalidArgument(f"config file needs a [{SECTION}] section")
        return cls.from_dict(dict(parser[SECTION]))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(f: dataclasses.Field, value):
    kind = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool, "str": str}[f.type]
    if kind is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise InvalidArgument(f"{f.name}: cannot read {value!r} as a boolean")
    try:
        if kind is int and isinstance(value, str):
            return int(value.strip())
        return kind(value)
    except (TypeError, ValueError):
        raise InvalidArgument(f"{f.name}: cannot read {value!r} as {kind.__name__}") from None

"""Single-file persistence of a ReferenceModel.

Layout (all integers little-endian)::

    bytes 0-7    magic b"KGADMODL"
    bytes 8-11   uint32 format version
    bytes 12-15  uint32 header length H
    bytes 16..   H bytes of UTF-8 JSON header
    then         payload: float32 little-endian C-order blocks

The header lists every block as ``{"name", "shape", "offset", "nbytes"}``
with ``offset`` counted from the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig
from .descriptors import FeatureMatrix
from .exceptions import ParseError
from .geometry import PointCloud
from .keypoints import KeypointSet
from .pipeline import ReferenceModel

MAGIC = b"KGADMODL"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


def _unit(n):
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


def save_model(model: ReferenceModel, path) -> None:
    blocks = [("base_points", model.base_cloud.points), ("base_normals", model.base_cloud.normals),
              ("centroids", model.centroids.positions)]
    for j, cluster in enumerate(model.clusters):
        blocks.append((f"cluster/{j}/points", cluster.points))
        blocks.append((f"cluster/{j}/sources", model.cluster_sources[j].reshape(-1, 1)))
        for kind in model.feature_kinds:
            blocks.append((f"cluster/{j}/{kind}", model.cluster_features[kind][j].rows))

    table, chunks, offset = [], [], 0
    for name, arr in blocks:
        data = np.ascontiguousarray(arr, dtype="<f4")
        raw = data.tobytes()
        table.append({"name": name, "shape": list(data.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    keys = model.centroids
    header = {
        "format": "kgad-model",
        "version": VERSION,
        "config": model.config.to_dict(),
        "feature_kinds": list(model.feature_kinds),
        "counts": {"clusters": model.n_clusters, "cluster_sizes": model.cluster_sizes(),
                   "base_points": len(model.base_cloud)},
        "fpfh_radius": model.fpfh_radius,
        "score_scale": dict(model.score_scale),
        "centroids": {"detector": keys.detector, "shortfall": keys.shortfall, "fallback": keys.fallback,
                      "indices": None if keys.indices is None else [int(i) for i in keys.indices]},
        "registrations": list(model.registrations),
        "blocks": table,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for raw in chunks:
            fh.write(raw)


def load_model(path) -> ReferenceModel:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise ParseError("file too short for a model header", 0, path)
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise ParseError("not a model file (bad magic)", 0, path)
    if version != VERSION:
        raise ParseError(f"unsupported model version {version}", 8, path)
    start = _PREFIX.size
    if start + hlen > len(data):
        raise ParseError("truncated model header", start, path)
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"malformed model header: {exc}", start, path) from None
    try:
        return _decode(header, data, start + hlen, path)
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ParseError(f"inconsistent model header: {exc!r}", start, path) from None


def _decode(header, data, payload, path) -> ReferenceModel:
    arrays = {}
    for b in header["blocks"]:
        lo = payload + b["offset"]
        if lo + b["nbytes"] > len(data):
            raise ParseError(f"block {b['name']} runs past end of file", lo, path)
        arrays[b["name"]] = np.frombuffer(data, dtype="<f4", count=b["nbytes"] // 4,
                                          offset=lo).reshape(b["shape"]).astype(np.float64)

    cfg = RunConfig.from_dict(header["config"])
    kinds = header["feature_kinds"]
    m = header["counts"]["clusters"]
    base = PointCloud(arrays["base_points"], _unit(arrays["base_normals"]))
    c = header["centroids"]
    keys = KeypointSet(arrays["centroids"], c["detector"],
                       None if c["indices"] is None else np.asarray(c["indices"], dtype=np.int64),
                       shortfall=c["shortfall"], fallback=c["fallback"])
    clusters = tuple(PointCloud(arrays[f"cluster/{j}/points"]) for j in range(m))
    sources = tuple(arrays[f"cluster/{j}/sources"].reshape(-1).astype(np.int64) for j in range(m))
    feats = {k: tuple(FeatureMatrix(arrays[f"cluster/{j}/{k}"], k) for j in range(m)) for k in kinds}
    return ReferenceModel(
        base_cloud=base,
        centroids=keys,
        clusters=clusters,
        cluster_features=feats,
        config=cfg,
        fpfh_radius=float(header["fpfh_radius"]),
        score_scale={k: float(v) for k, v in header["score_scale"].items()},
        cluster_sources=sources,
        registrations=tuple(header["registrations"]),
    )

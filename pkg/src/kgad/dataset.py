"""Labeled samples and their on-disk formats (PLY, PCD, raw arrays).

Raw array container (``.rawa``)::

    bytes 0-7   magic  b"KGADRAW1"
    bytes 8-11  uint32 little-endian header length H
    bytes 12..  UTF-8 JSON header of H bytes:
                {"n": rows, "dims": columns, "dtype": "<f4" | "<f8",
                 "columns": [names...]}
    then        n * dims values, row-major, little-endian

Point clouds use columns ``x y z`` plus optional ``nx ny nz`` and a mask
column; score files use a single ``score`` column of float32.
"""

from __future__ import annotations

import json
import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .exceptions import InvalidArgument, ParseError
from .geometry import PointCloud

logger = logging.getLogger(__name__)

RAW_MAGIC = b"KGADRAW1"
DEFAULT_MASK_PROPERTY = "anomaly"
FORMATS = ("ply", "pcd", "raw")

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass(frozen=True, eq=False)
class LabeledSample:
    cloud: PointCloud
    object_label: int = 0
    point_mask: Optional[NDArray[np.bool_]] = None
    name: str = ""

    def __post_init__(self):
        if self.point_mask is not None:
            mask = np.asarray(self.point_mask).astype(bool).reshape(-1)
            if mask.shape[0] != len(self.cloud):
                raise InvalidArgument("mask length must equal the cloud size")
            object.__setattr__(self, "point_mask", mask)
            if int(self.object_label) != int(mask.any()):
                raise InvalidArgument("object_label must be 1 exactly when the mask has anomalies")
        if int(self.object_label) not in (0, 1):
            raise InvalidArgument("object_label must be 0 or 1")


def infer_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return "ply"
    if suffix == ".pcd":
        return "pcd"
    if suffix in (".rawa", ".raw", ".bin"):
        return "raw"
    raise InvalidArgument(f"cannot infer point-cloud format from {path!s}")


# ---------------------------------------------------------------------------
# raw arrays


def write_raw_array(path, array, columns: Optional[Sequence[str]] = None, dtype: str = "<f4") -> None:
    a = np.asarray(array)
    if a.ndim == 1:
        a = a[:, None]
    if dtype not in ("<f4", "<f8"):
        raise InvalidArgument("raw arrays store <f4 or <f8")
    header = {"n": int(a.shape[0]), "dims": int(a.shape[1]), "dtype": dtype}
    if columns is not None:
        if len(columns) != a.shape[1]:
            raise InvalidArgument("column names must match the array width")
        header["columns"] = list(columns)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(a, dtype=dtype).tobytes())


def read_raw_array(path):
    """Return ``(array, header)`` from a raw array container."""
    data = Path(path).read_bytes()
    if data[:8] != RAW_MAGIC:
        raise ParseError("bad magic; not a raw array container", 0, path)
    if len(data) < 12:
        raise ParseError("truncated header", len(data), path)
    (hlen,) = struct.unpack_from("<I", data, 8)
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        n, dims, dtype = int(header["n"]), int(header["dims"]), header["dtype"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise ParseError(f"malformed JSON header: {exc}", 12, path) from None
    if dtype not in ("<f4", "<f8"):
        raise ParseError(f"unsupported dtype {dtype!r}", 12, path)
    start = 12 + hlen
    need = n * dims * np.dtype(dtype).itemsize
    if len(data) - start < need:
        raise ParseError(f"payload truncated: need {need} bytes", len(data), path)
    arr = np.frombuffer(data, dtype=dtype, count=n * dims, offset=start).reshape(n, dims)
    return arr.astype(np.float64), header


# ---------------------------------------------------------------------------
# PLY


def _parse_ply_header(data: bytes, path):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("missing ply magic or end_header", 0, path)
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    fmt = None
    elements = []
    offset = 0
    for raw_line in data[:end].split(b"\n"):
        line = raw_line.strip().decode("ascii", errors="replace")
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            pass
        elif tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise ParseError(f"unsupported PLY format line {line!r}", offset, path)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError(f"bad element line {line!r}", offset, path)
            try:
                elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
            except ValueError:
                raise ParseError(f"bad element count in {line!r}", offset, path) from None
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", offset, path)
            if len(tok) == 5 and tok[1] == "list":
                if tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise ParseError(f"unknown list type in {line!r}", offset, path)
                elements[-1]["props"].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            elif len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1]["props"].append((tok[2], "scalar", _PLY_TYPES[tok[1]], None))
            else:
                raise ParseError(f"bad property line {line!r}", offset, path)
        else:
            raise ParseError(f"unexpected header line {line!r}", offset, path)
        offset += len(raw_line) + 1
    if fmt is None:
        raise ParseError("PLY header has no format line", 0, path)
    return fmt, elements, body_start


def _read_ply_binary(data, elements, start, endian, path):
    pos = start
    out = {}
    for el in elements:
        scalar = all(p[1] == "scalar" for p in el["props"])
        if scalar:
            dt = np.dtype([(p[0], endian + p[2]) for p in el["props"]])
            need = dt.itemsize * el["count"]
            if pos + need > len(data):
                raise ParseError(f"element {el['name']!r} truncated", len(data), path)
            out[el["name"]] = np.frombuffer(data, dtype=dt, count=el["count"], offset=pos)
            pos += need
            continue
        # Elements with list properties (faces) are walked but not kept.
        for _ in range(el["count"]):
            for name, kind, t1, t2 in el["props"]:
                if kind == "scalar":
                    pos += np.dtype(t1).itemsize
                else:
                    if pos + np.dtype(t1).itemsize > len(data):
                        raise ParseError(f"list property {name!r} truncated", pos, path)
                    cnt = int(np.frombuffer(data, endian + t1, 1, pos)[0])
                    pos += np.dtype(t1).itemsize + cnt * np.dtype(t2).itemsize
            if pos > len(data):
                raise ParseError(f"element {el['name']!r} truncated", len(data), path)
    return out


def _read_ply_ascii(data, elements, start, path):
    lines = data[start:].split(b"\n")
    line_offsets = np.cumsum([start] + [len(x) + 1 for x in lines])
    row = 0
    out = {}
    for el in elements:
        scalar = all(p[1] == "scalar" for p in el["props"])
        if not scalar:
            row += el["count"]
            continue
        chunk = lines[row:row + el["count"]]
        if len(chunk) < el["count"]:
            raise ParseError(f"element {el['name']!r} truncated", int(line_offsets[-1]), path)
        dt = np.dtype([(p[0], p[2]) for p in el["props"]])
        arr = np.empty(el["count"], dtype=dt)
        for i, line in enumerate(chunk):
            vals = line.split()
            if len(vals) != len(el["props"]):
                raise ParseError(
                    f"expected {len(el['props'])} values, got {len(vals)}",
                    int(line_offsets[row + i]), path)
            try:
                arr[i] = tuple(float(v) for v in vals)
            except ValueError:
                raise ParseError(f"non-numeric value in {line!r}", int(line_offsets[row + i]), path) from None
        out[el["name"]] = arr
        row += el["count"]
    return out


def read_ply(path, mask_property: str = DEFAULT_MASK_PROPERTY):
    """Return ``(points, normals or None, mask or None)`` from a PLY file."""
    data = Path(path).read_bytes()
    fmt, elements, start = _parse_ply_header(data, path)
    if not any(el["name"] == "vertex" for el in elements):
        raise ParseError("PLY has no vertex element", 0, path)
    if fmt == "ascii":
        els = _read_ply_ascii(data, elements, start, path)
    else:
        els = _read_ply_binary(data, elements, start, "<" if fmt == "binary_little_endian" else ">", path)
    vert = els.get("vertex")
    if vert is None:
        raise ParseError("vertex element uses list properties", start, path)
    names = vert.dtype.names
    for axis in "xyz":
        if axis not in names:
            raise ParseError(f"vertex element lacks property {axis!r}", start, path)
    pts = np.column_stack([vert[a].astype(np.float64) for a in "xyz"])
    normals = None
    if all(a in names for a in ("nx", "ny", "nz")):
        normals = np.column_stack([vert[a].astype(np.float64) for a in ("nx", "ny", "nz")])
    mask = None
    if mask_property in names:
        mask = vert[mask_property].astype(np.float64) > 0.5
    known = {"x", "y", "z", "nx", "ny", "nz", mask_property}
    skipped = [p for p in names if p not in known]
    if skipped:
        warnings.warn(f"{Path(path).name}: skipping unsupported vertex properties {skipped}", stacklevel=2)
    return pts, normals, mask


def write_ply(path, cloud: PointCloud, mask=None, binary: bool = True,
              mask_property: str = DEFAULT_MASK_PROPERTY, dtype: str = "f8") -> None:
    cols = [("x", cloud.points[:, 0]), ("y", cloud.points[:, 1]), ("z", cloud.points[:, 2])]
    if cloud.has_normals:
        cols += [(a, cloud.normals[:, i]) for i, a in enumerate(("nx", "ny", "nz"))]
    types = [dtype] * len(cols)
    if mask is not None:
        cols.append((mask_property, np.asarray(mask, dtype=np.float64)))
        types.append("f4")
    ply_names = {"f4": "float", "f8": "double"}
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {len(cloud)}",
    ]
    header += [f"property {ply_names[t]} {name}" for (name, _), t in zip(cols, types)]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            dt = np.dtype([(name, "<" + t) for (name, _), t in zip(cols, types)])
            rec = np.empty(len(cloud), dtype=dt)
            for name, vals in cols:
                rec[name] = vals
            f.write(rec.tobytes())
        else:
            arr = np.column_stack([v for _, v in cols])
            for row in arr:
                f.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# PCD (ASCII)


def read_pcd(path):
    data = Path(path).read_bytes()
    lines = data.split(b"\n")
    fields, npoints, offset = None, None, 0
    for i, raw in enumerate(lines):
        line = raw.strip().decode("ascii", errors="replace")
        tok = line.split()
        if tok and tok[0] == "FIELDS":
            fields = tok[1:]
        elif tok and tok[0] == "POINTS":
            npoints = int(tok[1])
        elif tok and tok[0] == "DATA":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError(f"only ASCII PCD is supported, got {line!r}", offset, path)
            body = lines[i + 1:]
            body_offset = offset + len(raw) + 1
            break
        offset += len(raw) + 1
    else:
        raise ParseError("PCD header has no DATA line", offset, path)
    if fields is None or not all(a in fields for a in "xyz"):
        raise ParseError("PCD header lacks x/y/z FIELDS", 0, path)
    rows = []
    pos = body_offset
    for raw in body:
        if raw.strip():
            vals = raw.split()
            if len(vals) != len(fields):
                raise ParseError(f"expected {len(fields)} values", pos, path)
            try:
                rows.append([float(v) for v in vals])
            except ValueError:
                raise ParseError("non-numeric PCD value", pos, path) from None
        pos += len(raw) + 1
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, len(fields))
    if npoints is not None and arr.shape[0] != npoints:
        raise ParseError(f"POINTS says {npoints}, found {arr.shape[0]}", pos, path)
    idx = [fields.index(a) for a in "xyz"]
    extra = [f for f in fields if f not in "xyz"]
    if extra:
        warnings.warn(f"{Path(path).name}: skipping PCD fields {extra}", stacklevel=2)
    return arr[:, idx]


def write_pcd(path, cloud: PointCloud) -> None:
    header = [
        "# .PCD v0.7 - Point Cloud Data file format",
        "VERSION 0.7", "FIELDS x y z", "SIZE 8 8 8", "TYPE F F F", "COUNT 1 1 1",
        f"WIDTH {len(cloud)}", "HEIGHT 1", "VIEWPOINT 0 0 0 1 0 0 0",
        f"POINTS {len(cloud)}", "DATA ascii",
    ]
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(header) + "\n")
        for p in cloud.points:
            f.write(" ".join(repr(float(v)) for v in p) + "\n")


# ---------------------------------------------------------------------------
# samples


def load_sample(path, format: Optional[str] = None, mask_property: str = DEFAULT_MASK_PROPERTY) -> LabeledSample:
    """Load a point cloud file; a per-point ground-truth channel becomes the mask."""
    path = Path(path)
    fmt = (format or infer_format(path)).lower()
    normals = mask = None
    if fmt == "ply":
        pts, normals, mask = read_ply(path, mask_property)
    elif fmt == "pcd":
        pts = read_pcd(path)
    elif fmt == "raw":
        arr, header = read_raw_array(path)
        cols = header.get("columns") or ["x", "y", "z"][: arr.shape[1]]
        if not all(a in cols for a in "xyz"):
            raise ParseError("raw array lacks x/y/z columns", 12, path)
        pts = arr[:, [cols.index(a) for a in "xyz"]]
        if all(a in cols for a in ("nx", "ny", "nz")):
            normals = arr[:, [cols.index(a) for a in ("nx", "ny", "nz")]]
        if mask_property in cols:
            mask = arr[:, cols.index(mask_property)] > 0.5
    else:
        raise InvalidArgument(f"unsupported format {fmt!r}")
    if normals is not None:
        lens = np.linalg.norm(normals, axis=1)
        if np.any(lens == 0):
            normals = None
        else:
            normals = normals / lens[:, None]
    cloud = PointCloud(pts, normals)
    label = int(mask.any()) if mask is not None else 0
    return LabeledSample(cloud, label, mask, path.stem)


def save_sample(path, sample: LabeledSample, format: Optional[str] = None, binary: bool = True,
                mask_property: str = DEFAULT_MASK_PROPERTY) -> None:
    path = Path(path)
    fmt = (format or infer_format(path)).lower()
    if fmt == "ply":
        write_ply(path, sample.cloud, sample.point_mask, binary=binary, mask_property=mask_property)
    elif fmt == "pcd":
        write_pcd(path, sample.cloud)
    elif fmt == "raw":
        cols = [sample.cloud.points]
        names = ["x", "y", "z"]
        if sample.cloud.has_normals:
            cols.append(sample.cloud.normals)
            names += ["nx", "ny", "nz"]
        if sample.point_mask is not None:
            cols.append(sample.point_mask.astype(np.float64)[:, None])
            names.append(mask_property)
        write_raw_array(path, np.hstack(cols), names, dtype="<f8")
    else:
        raise InvalidArgument(f"unsupported format {fmt!r}")


def read_scores(path) -> NDArray[np.float64]:
    arr, _ = read_raw_array(path)
    return arr[:, 0]


def write_scores(path, scores) -> None:
    write_raw_array(path, np.asarray(scores, dtype=np.float64)[:, None], ["score"], dtype="<f4")

"""Synthetic objects and defect injection for desk-scale benchmarking."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .dataset import LabeledSample
from .exceptions import InvalidArgument
from .geometry import PointCloud, estimate_normals, mean_spacing

SHAPES = ("sphere", "cube", "torus", "blend")
DEFECT_KINDS = ("dent", "bump", "crop", "noise-patch")

TORUS_MAJOR = 1.0
TORUS_MINOR = 0.35

# Lobes of the asymmetric "blend" blob: (unit direction, amplitude, angular width).
_BLEND_LOBES = (
    ((0.58, 0.58, 0.58), 0.28, 0.30),
    ((-0.80, 0.20, -0.57), 0.20, 0.35),
    ((0.10, -0.95, 0.30), 0.16, 0.25),
    ((-0.30, -0.20, 0.93), 0.12, 0.22),
)


class NoOpDefect(UserWarning):
    """The defect region contains no points; the sample is unchanged."""


@dataclass(frozen=True)
class DefectSpec:
    kind: str
    center: tuple
    radius: float
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFECT_KINDS:
            raise InvalidArgument(f"unknown defect kind {self.kind!r}")
        if not self.radius > 0:
            raise InvalidArgument("defect radius must be positive")
        if self.magnitude < 0:
            raise InvalidArgument("defect magnitude must be non-negative")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))


def _unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _blend_radius(d):
    """Radius and its ambient gradient for the blob, evaluated at unit ``d``."""
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    r = 1.0 + 0.18 * x * y + 0.12 * z * z - 0.08 * x
    g = np.column_stack([0.18 * y - 0.08, 0.18 * x, 0.24 * z])
    for c, amp, width in _BLEND_LOBES:
        c = np.asarray(c) / np.linalg.norm(c)
        diff = d - c
        e = amp * np.exp(-np.einsum("ij,ij->i", diff, diff) / (2 * width * width))
        r = r + e
        g = g - e[:, None] * diff / (width * width)
    return r, g


def _sample_blend(rng, n):
    out = np.empty((0, 3))
    nrm = np.empty((0, 3))
    while out.shape[0] < n:
        d = _unit(rng, 4 * n)
        r, g = _blend_radius(d)
        gt = g - np.einsum("ij,ij->i", g, d)[:, None] * d
        area = r * np.sqrt(r * r + np.einsum("ij,ij->i", gt, gt))
        keep = rng.uniform(size=area.shape[0]) * (1.25 * area.max()) < area
        # Surface X = r(d) d has normal proportional to r d - grad_t r.
        nn = r[:, None] * d - gt
        out = np.vstack([out, r[keep, None] * d[keep]])
        nrm = np.vstack([nrm, nn[keep] / np.linalg.norm(nn[keep], axis=1, keepdims=True)])
    return out[:n], nrm[:n]


def _sample_cube(rng, n):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    for a in range(3):
        sel = axis == a
        others = [b for b in range(3) if b != a]
        pts[sel, a] = sign[sel]
        pts[np.ix_(sel, others)] = uv[sel]
        nrm[sel, a] = sign[sel]
    return pts, nrm


def _sample_torus(rng, n):
    out_u, out_v = [], []
    got = 0
    while got < n:
        u = rng.uniform(0, 2 * np.pi, size=2 * n)
        v = rng.uniform(0, 2 * np.pi, size=2 * n)
        w = rng.uniform(0, TORUS_MAJOR + TORUS_MINOR, size=2 * n)
        keep = w < TORUS_MAJOR + TORUS_MINOR * np.cos(v)
        out_u.append(u[keep])
        out_v.append(v[keep])
        got += int(keep.sum())
    u = np.concatenate(out_u)[:n]
    v = np.concatenate(out_v)[:n]
    ring = TORUS_MAJOR + TORUS_MINOR * np.cos(v)
    pts = np.column_stack([ring * np.cos(u), ring * np.sin(u), TORUS_MINOR * np.sin(v)])
    nrm = np.column_stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)])
    return pts, nrm


def torus_surface_distance(points) -> NDArray[np.float64]:
    p = np.asarray(points, dtype=np.float64)
    ring = np.hypot(p[:, 0], p[:, 1]) - TORUS_MAJOR
    return np.abs(np.hypot(ring, p[:, 2]) - TORUS_MINOR)


def synth_object(shape: str = "blend", n_points: int = 20000, noise_sigma: float = 0.0,
                 seed: int = 0, return_normals: bool = False):
    """Sample ``n_points`` from a canonical surface plus isotropic Gaussian noise.

    Shapes: unit sphere, cube of side 2, torus (radii 1 and 0.35), and an
    asymmetric lobed blob ("blend") that registers without ambiguity.
    ``return_normals`` attaches the analytic normals of the clean surface.
    """
    if shape not in SHAPES:
        raise InvalidArgument(f"unknown shape {shape!r}; expected one of {SHAPES}")
    if n_points < 100:
        raise InvalidArgument("synthetic objects need at least 100 points")
    if noise_sigma < 0:
        raise InvalidArgument("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    if shape == "sphere":
        nrm = _unit(rng, n_points)
        pts = nrm.copy()
    elif shape == "cube":
        pts, nrm = _sample_cube(rng, n_points)
    elif shape == "torus":
        pts, nrm = _sample_torus(rng, n_points)
    else:
        pts, nrm = _sample_blend(rng, n_points)
    if noise_sigma > 0:
        pts = pts + rng.normal(scale=noise_sigma, size=pts.shape)
    return PointCloud(pts, nrm if return_normals else None)


def inject_defect(cloud: PointCloud, spec: DefectSpec) -> LabeledSample:
    """Apply one localized defect.

    Points within ``spec.radius`` of the center are pushed along their
    normal (``-magnitude`` for a dent, ``+magnitude`` for a bump), jittered
    with Gaussian noise of scale ``magnitude`` (noise-patch), or removed
    (crop). The mask marks exactly the moved points; for a crop it marks
    the surviving points within two point spacings of a removed one.
    """
    center = np.asarray(spec.center, dtype=np.float64)
    pts = cloud.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    if np.any(center < lo - 1e-12) or np.any(center > hi + 1e-12):
        raise InvalidArgument("defect center lies outside the cloud bounding box")
    inside = np.linalg.norm(pts - center, axis=1) <= spec.radius
    if not inside.any():
        warnings.warn("defect region contains no points", NoOpDefect, stacklevel=2)
        return LabeledSample(cloud, 0, np.zeros(len(cloud), bool))
    if spec.magnitude == 0:
        return LabeledSample(cloud, 0, np.zeros(len(cloud), bool))

    if spec.kind == "crop":
        keep = ~inside
        removed = pts[inside]
        survivors = cloud.subset(np.flatnonzero(keep))
        d, _ = cKDTree(removed).query(survivors.points, k=1)
        mask = d <= 2.0 * mean_spacing(cloud)
        return LabeledSample(survivors, int(mask.any()), mask)

    new = pts.copy()
    if spec.kind == "noise-patch":
        rng = np.random.default_rng(spec.seed)
        new[inside] += rng.normal(scale=spec.magnitude, size=(int(inside.sum()), 3))
    else:
        normals = cloud.normals
        if normals is None:
            normals = estimate_normals(cloud, k=min(30, len(cloud) - 1)).normals
        sign = -1.0 if spec.kind == "dent" else 1.0
        new[inside] += sign * spec.magnitude * normals[inside]
    out = PointCloud(new)
    return LabeledSample(out, 1, inside)

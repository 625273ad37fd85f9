"""Synthetic-defect benchmark over a grid of pipeline settings.

Each (shape, seed) group draws posed prototypes and posed normal tests.
Every defective test is the matching normal test with one defect applied
in the canonical frame before posing, so the defect is the only
difference between the two; labels follow that pairing. Defect magnitudes
are multiples of the noise standard deviation.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import RunConfig
from .dataset import LabeledSample, save_sample
from .exceptions import InvalidArgument, KgadError
from .geometry import PointCloud, RigidTransform, random_rotation
from .metrics import auroc, point_auroc
from .pipeline import build_reference, infer, prepare_base
from .registration import RegistrationResult, RegistrationTarget, register
from .synthetic import DEFECT_KINDS, SHAPES, DefectSpec, inject_defect, synth_object

logger = logging.getLogger(__name__)

CACHE_ENV = "KGAD_CACHE_DIR"
GRID_SECTION = "grid"
_TUPLE_FIELDS = ("shapes", "magnitudes", "detectors", "samplings", "features", "seeds", "defect_kinds")


@dataclass
class BenchmarkGrid:
    shapes: tuple = ("blend",)
    magnitudes: tuple = (0.0, 10.0)
    detectors: tuple = ("iss",)
    samplings: tuple = ("fs",)
    features: tuple = ("raw+fpfh",)
    seeds: tuple = (0,)
    n_prototypes: int = 4
    n_normal: int = 20
    n_defective: int = 20
    n_points: int = 20000
    noise_frac: float = 0.002
    defect_radius_frac: float = 0.1
    defect_kinds: tuple = ("dent", "bump")
    max_rotation_deg: float = 60.0
    max_translation_frac: float = 0.25
    pooling: str = "per_object"

    def __post_init__(self):
        for name in _TUPLE_FIELDS:
            setattr(self, name, tuple(getattr(self, name)))
        self.magnitudes = tuple(float(m) for m in self.magnitudes)
        self.seeds = tuple(int(s) for s in self.seeds)
        if any(s not in SHAPES for s in self.shapes):
            raise InvalidArgument(f"shapes must come from {SHAPES}")
        if any(k not in DEFECT_KINDS for k in self.defect_kinds) or not self.defect_kinds:
            raise InvalidArgument(f"defect kinds must come from {DEFECT_KINDS}")
        if any(m < 0 for m in self.magnitudes):
            raise InvalidArgument("defect magnitudes must be non-negative")
        if self.n_prototypes < 1 or self.n_normal < 1 or self.n_defective < 1:
            raise InvalidArgument("need at least one prototype, normal and defective test")
        if self.n_defective > self.n_normal:
            raise InvalidArgument("each defective test pairs with a normal test: n_defective <= n_normal")
        if self.pooling not in ("per_object", "global"):
            raise InvalidArgument("pooling must be 'per_object' or 'global'")
        for name in ("shapes", "magnitudes", "detectors", "samplings", "features", "seeds"):
            if not getattr(self, name):
                raise InvalidArgument(f"grid axis {name} is empty")

    def dumps(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser[GRID_SECTION] = {
            f.name: ", ".join(_fmt(v) for v in getattr(self, f.name)) if f.name in _TUPLE_FIELDS
            else _fmt(getattr(self, f.name))
            for f in fields(self)
        }
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_section(cls, section) -> "BenchmarkGrid":
        types = {f.name: f for f in fields(cls)}
        values = {}
        for key, raw in section.items():
            if key not in types:
                raise InvalidArgument(f"unknown grid key {key!r}")
            if key in _TUPLE_FIELDS:
                values[key] = tuple(v.strip() for v in raw.split(",") if v.strip())
            else:
                kind = type(getattr(cls(), key))
                try:
                    values[key] = kind(raw.strip())
                except ValueError:
                    raise InvalidArgument(f"grid key {key}: cannot read {raw!r}") from None
        return cls(**values)

    @classmethod
    def loads(cls, text: str) -> "BenchmarkGrid":
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_string(text)
        if not parser.has_section(GRID_SECTION):
            raise InvalidArgument(f"grid file needs a [{GRID_SECTION}] section")
        return cls.from_section(parser[GRID_SECTION])


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


@dataclass(frozen=True, eq=False)
class SyntheticGroup:
    shape: str
    seed: int
    sigma: float
    diameter: float
    prototypes: tuple
    normals: tuple
    defects: Dict[float, tuple]


def _pose(rng, grid: BenchmarkGrid, diameter: float) -> RigidTransform:
    R = random_rotation(rng, np.deg2rad(grid.max_rotation_deg))
    t = rng.uniform(-grid.max_translation_frac, grid.max_translation_frac, 3) * diameter
    return RigidTransform(R, t)


def make_group(shape: str, seed: int, grid: BenchmarkGrid) -> SyntheticGroup:
    """Draw the prototypes and test samples of one (shape, seed) group."""
    sid = SHAPES.index(shape)
    diameter = synth_object(shape, grid.n_points, 0.0, seed).diameter()
    sigma = grid.noise_frac * diameter
    pose_rng = np.random.default_rng([seed, sid, 1])

    def draw(stream: int, k: int) -> PointCloud:
        return synth_object(shape, grid.n_points, sigma, int(np.random.SeedSequence([seed, sid, stream, k])
                                                             .generate_state(1)[0]), return_normals=True)

    protos = tuple(draw(2, i).transformed(_pose(pose_rng, grid, diameter)).with_normals(None)
                   for i in range(grid.n_prototypes))
    clean, poses = [], []
    for k in range(grid.n_normal):
        clean.append(draw(3, k))
        poses.append(_pose(pose_rng, grid, diameter))
    normals = tuple(LabeledSample(c.transformed(T).with_normals(None), 0, None, f"normal_{k:02d}")
                    for k, (c, T) in enumerate(zip(clean, poses)))

    defects = {}
    for mag in grid.magnitudes:
        out = []
        for k in range(grid.n_defective):
            rng = np.random.default_rng([seed, sid, 4, k])
            c = clean[k]
            center = c.points[rng.integers(len(c))]
            kind = grid.defect_kinds[k % len(grid.defect_kinds)]
            spec = DefectSpec(kind, center, grid.defect_radius_frac * diameter, mag * sigma, seed=k)
            s = inject_defect(c, spec)
            mask = s.point_mask if s.point_mask is not None else np.zeros(len(s.cloud), bool)
            cloud = s.cloud.transformed(poses[k]).with_normals(None)
            out.append(_DefectSample(cloud, mask, f"defect_{k:02d}"))
        defects[mag] = tuple(out)
    return SyntheticGroup(shape, seed, sigma, diameter, protos, normals, defects)


@dataclass(frozen=True, eq=False)
class _DefectSample:
    """A test with defective role; the mask may be empty at magnitude 0."""

    cloud: PointCloud
    point_mask: np.ndarray
    name: str


def write_group(group: SyntheticGroup, root) -> None:
    base = Path(root) / group.shape / f"seed{group.seed}"
    (base / "prototypes").mkdir(parents=True, exist_ok=True)
    (base / "tests").mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(group.prototypes):
        save_sample(base / "prototypes" / f"proto_{i}.ply", LabeledSample(p))
    labels = {}
    for s in group.normals:
        save_sample(base / "tests" / f"{s.name}.ply", s)
        labels[s.name] = 0
    for mag, samples in group.defects.items():
        d = base / "tests" / f"mag{mag:g}"
        d.mkdir(exist_ok=True)
        mag_labels = dict(labels)
        for s in samples:
            m = s.point_mask
            save_sample(d / f"{s.name}.ply", LabeledSample(s.cloud, int(m.any()), m, s.name))
            mag_labels[s.name] = 1
        (d / "labels.json").write_text(json.dumps(mag_labels, sort_keys=True, indent=1) + "\n")


class RegistrationCache:
    """In-memory cache of test alignments, optionally mirrored to disk."""

    def __init__(self, directory: Optional[str] = None):
        self.directory = Path(directory) if directory else None
        self._mem: Dict[str, RegistrationResult] = {}
        self._lock = threading.Lock()

    @staticmethod
    def key(cloud: PointCloud, target: RegistrationTarget) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(cloud.points).tobytes())
        h.update(np.ascontiguousarray(target.working.points).tobytes())
        h.update(repr(target.cfg).encode())
        return h.hexdigest()

    def get(self, cloud: PointCloud, target: RegistrationTarget) -> RegistrationResult:
        k = self.key(cloud, target)
        with self._lock:
            if k in self._mem:
                return self._mem[k]
        res = self._load(k)
        if res is None:
            res = register(cloud, target, target.cfg)
            self._store(k, res)
        with self._lock:
            self._mem[k] = res
        return res

    def _path(self, k):
        return self.directory / f"reg_{k}.json" if self.directory else None

    def _load(self, k) -> Optional[RegistrationResult]:
        p = self._path(k)
        if p is None or not p.exists():
            return None
        try:
            d = json.loads(p.read_text())
            T = RigidTransform(np.array(d["rotation"]), np.array(d["translation"]))
            return RegistrationResult(T, d["fitness"], d["rmse"], d["converged"], d["iterations"])
        except (ValueError, KeyError, KgadError):
            return None

    def _store(self, k, res: RegistrationResult) -> None:
        p = self._path(k)
        if p is None:
            return
        p.parent.mkdir(parents=True, exist_ok=True)
        d = {"rotation": res.transform.rotation.tolist(), "translation": res.transform.translation.tolist(),
             "fitness": res.fitness, "rmse": res.inlier_rmse, "converged": res.converged,
             "iterations": res.iterations}
        p.write_text(json.dumps(d))


@dataclass
class BenchmarkReport:
    rows: List[dict]
    timings: Dict[str, dict] = field(default_factory=dict)
    config: Optional[dict] = None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.rows)

    def to_markdown(self) -> str:
        return render_markdown(self.rows)

    def errors(self) -> List[dict]:
        return [r for r in self.rows if r["status"] != "ok"]

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.jsonl").write_text(self.to_jsonl())
        (out / "report.md").write_text(self.to_markdown())
        (out / "timings.json").write_text(json.dumps(self.timings, sort_keys=True, indent=1) + "\n")


def _cell_key(shape, mag, seed, det, samp, feat) -> str:
    return f"{shape}|{mag:g}|{seed}|{det}|{samp}|{feat}"


def _num(v):
    return "n/a" if v is None else f"{v:.4f}"


def render_markdown(rows: Sequence[dict]) -> str:
    head = ("| shape | magnitude (sigma) | seed | detector | sampling | features | O-AUROC | "
            "O-AUROC eq14 | O-AUROC max | P-AUROC | status |")
    lines = [head, "|" + "---|" * 11]
    for r in rows:
        lines.append(f"| {r['shape']} | {r['magnitude']:g} | {r['seed']} | {r['detector']} | {r['sampling']} | "
                     f"{r['features']} | {_num(r['o_auroc'])} | {_num(r['o_auroc_eq14'])} | "
                     f"{_num(r['o_auroc_max'])} | {_num(r['p_auroc'])} | {r['status']} |")
    groups: Dict[tuple, List[dict]] = {}
    for r in rows:
        if r["status"] == "ok":
            groups.setdefault((r["shape"], r["magnitude"], r["detector"], r["sampling"], r["features"]), []).append(r)
    if groups:
        lines += ["", "Mean over seeds:", "",
                  "| shape | magnitude (sigma) | detector | sampling | features | seeds | O-AUROC | P-AUROC |",
                  "|" + "---|" * 8]
        for key in sorted(groups):
            g = groups[key]
            o = float(np.mean([r["o_auroc"] for r in g]))
            ps = [r["p_auroc"] for r in g if r["p_auroc"] is not None]
            p = float(np.mean(ps)) if ps else None
            lines.append(f"| {key[0]} | {key[1]:g} | {key[2]} | {key[3]} | {key[4]} | {len(g)} | "
                         f"{_num(o)} | {_num(p)} |")
    return "\n".join(lines) + "\n"


def _metrics(normal_res, defect_res, defect_masks, normal_sizes, aggregation, pooling):
    labels = [0] * len(normal_res) + [1] * len(defect_res)
    out = {}
    for agg in ("eq14", "max"):
        scores = [r.object_scores[agg] for r in normal_res] + [r.object_scores[agg] for r in defect_res]
        out[f"o_auroc_{agg}"] = auroc(labels, scores)
    out["o_auroc"] = out[f"o_auroc_{aggregation}"]
    masks = [np.zeros(n, bool) for n in normal_sizes] + list(defect_masks)
    scores = [r.point_scores for r in normal_res] + [r.point_scores for r in defect_res]
    per_obj = point_auroc(list(defect_masks), [r.point_scores for r in defect_res], "per_object")
    any_pos = any(m.any() for m in masks)
    glob = point_auroc(masks, scores, "global") if any_pos else None
    out["p_auroc_per_object"] = per_obj
    out["p_auroc_global"] = glob
    out["p_auroc"] = per_obj if pooling == "per_object" else glob
    return out


def run_benchmark(model_cfg: Optional[RunConfig] = None, grid: Optional[BenchmarkGrid] = None,
                  seeds: Optional[Sequence[int]] = None, n_jobs: int = 1, data_dir=None,
                  cache_dir: Optional[str] = None) -> BenchmarkReport:
    """Score every grid cell and collect metrics.

    A cell is (shape, magnitude, seed, detector, sampling, features). Cells
    of one (shape, seed) group share the synthetic data and the test
    alignments. Pipeline errors mark the cell's rows and the grid goes on.
    """
    model_cfg = model_cfg or RunConfig()
    grid = grid or BenchmarkGrid()
    if seeds is not None:
        grid = dataclasses.replace(grid, seeds=tuple(seeds))
    cache = RegistrationCache(cache_dir if cache_dir is not None else os.environ.get(CACHE_ENV))
    rows: List[dict] = []
    timings: Dict[str, dict] = {}

    for shape in grid.shapes:
        for seed in grid.seeds:
            t0 = time.perf_counter()
            group = make_group(shape, seed, grid)
            if data_dir is not None:
                write_group(group, data_dir)
            gen_time = time.perf_counter() - t0
            base_cfg = model_cfg.replace(seed=seed)
            cells = [(d, s, f) for d in grid.detectors for s in grid.samplings for f in grid.features]
            try:
                t1 = time.perf_counter()
                target = RegistrationTarget(prepare_base(group.prototypes, base_cfg),
                                            base_cfg.registration_config())
                tests = list(group.normals) + [s for m in grid.magnitudes for s in group.defects[m]]
                protos = [i for i in range(len(group.prototypes)) if i != base_cfg.base_index]
                jobs = [group.prototypes[i] for i in protos] + [s.cloud for s in tests]
                if n_jobs > 1:
                    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                        regs = list(pool.map(lambda c: cache.get(c, target), jobs))
                else:
                    regs = [cache.get(c, target) for c in jobs]
                proto_regs = dict(zip(protos, regs[:len(protos)]))
                test_regs = {id(s): r for s, r in zip(tests, regs[len(protos):])}
                reg_time = time.perf_counter() - t1
                group_error = None
            except KgadError as exc:
                group_error, proto_regs, test_regs, reg_time = exc, {}, {}, 0.0

            def run_cell(cell):
                det, samp, feat = cell
                if group_error is not None:
                    raise group_error
                cfg = base_cfg.replace(detector=det, sampling=samp, features=feat)
                t = time.perf_counter()
                model = build_reference(group.prototypes, cfg, prototype_registrations=proto_regs)
                model._target.append(target)
                build_time = time.perf_counter() - t
                t = time.perf_counter()
                normal_res = [infer(s.cloud, model, cfg, test_regs[id(s)]) for s in group.normals]
                defect_res = {m: [infer(s.cloud, model, cfg, test_regs[id(s)]) for s in group.defects[m]]
                              for m in grid.magnitudes}
                infer_time = time.perf_counter() - t
                return model, normal_res, defect_res, build_time, infer_time

            def safe(cell):
                try:
                    return run_cell(cell), None
                except KgadError as exc:
                    logger.warning("benchmark cell %s/%s failed: %s", shape, cell, exc)
                    return None, exc

            if n_jobs > 1 and len(cells) > 1:
                with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                    outcomes = list(pool.map(safe, cells))
            else:
                outcomes = [safe(c) for c in cells]

            for (det, samp, feat), (res, err) in zip(cells, outcomes):
                for mag in grid.magnitudes:
                    key = _cell_key(shape, mag, seed, det, samp, feat)
                    row = {"shape": shape, "magnitude": mag, "seed": seed, "detector": det,
                           "sampling": samp, "features": feat, "aggregation": model_cfg.aggregation,
                           "pooling": grid.pooling, "n_normal": len(group.normals),
                           "n_defective": len(group.defects[mag]), "status": "ok", "error": None,
                           "o_auroc": None, "o_auroc_eq14": None, "o_auroc_max": None,
                           "p_auroc": None, "p_auroc_per_object": None, "p_auroc_global": None,
                           "clusters": None, "centroid_fallback": None}
                    if err is not None:
                        row.update(status="error", error=f"{type(err).__name__}: {err}")
                    else:
                        model, normal_res, defect_res, build_time, infer_time = res
                        samples = group.defects[mag]
                        row.update(_metrics(normal_res, defect_res[mag], [s.point_mask for s in samples],
                                            [len(s.cloud) for s in group.normals],
                                            model_cfg.aggregation, grid.pooling))
                        row["clusters"] = model.cluster_sizes()
                        row["centroid_fallback"] = bool(model.centroids.fallback)
                        n_inf = len(group.normals) + sum(len(v) for v in defect_res.values())
                        timings[key] = {"generate_s": gen_time, "register_s": reg_time,
                                        "build_s": build_time, "infer_s_per_sample": infer_time / n_inf}
                    rows.append(row)

    rows.sort(key=lambda r: (r["shape"], r["magnitude"], r["seed"], r["detector"], r["sampling"], r["features"]))
    return BenchmarkReport(rows, timings, model_cfg.to_dict())

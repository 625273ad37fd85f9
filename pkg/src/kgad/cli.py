"""Command line entry point: preprocess, infer, evaluate, synth."""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional

import numpy as np

from .benchmark import BenchmarkGrid, run_benchmark
from .config import RunConfig
from .dataset import load_sample, read_scores, write_scores
from .exceptions import InvalidArgument, KgadError, ParseError, RegistrationFailed
from .metrics import auroc, point_auroc
from .model_io import load_model, save_model
from .pipeline import build_reference, infer

logger = logging.getLogger("kgad")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2
CLOUD_SUFFIXES = (".ply", ".pcd", ".rawa", ".raw", ".bin")


class UsageError(Exception):
    def __init__(self, message, **extra):
        super().__init__(message)
        self.extra = extra


def _error(exc, **extra) -> dict:
    rec = {"error": type(exc).__name__, "message": str(exc)}
    for key in ("path", "offset", "prototype_id"):
        v = getattr(exc, key, None)
        if v is not None:
            rec[key] = str(v) if key == "path" else v
    rec.update({k: v for k, v in extra.items() if v is not None})
    if isinstance(exc, UsageError):
        rec.update(exc.extra)
    return rec


def _emit(record: dict, stream=None) -> None:
    print(json.dumps(record, sort_keys=True), file=stream or sys.stdout, flush=True)


def _config(args, base: Optional[RunConfig] = None) -> RunConfig:
    """File values (or ``base``) overridden by command line flags."""
    cfg = base or RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}", path=str(path))
        try:
            parser = configparser.ConfigParser(interpolation=None)
            parser.read_string(path.read_text(encoding="utf-8"))
        except configparser.Error as exc:
            raise UsageError(f"cannot parse config {path}: {exc}", path=str(path)) from None
        if parser.has_section("run"):
            values = cfg.to_dict()
            values.update(dict(parser["run"]))
            cfg = RunConfig.from_dict(values)
    flags = {"seed": args.seed, "detector": args.detector, "sampling": args.sampling,
             "features": args.features, "aggregation": args.aggregation, "n_jobs": args.jobs}
    changes = {k: v for k, v in flags.items() if v is not None}
    return cfg.replace(**changes) if changes else cfg


def _check_files(paths) -> List[Path]:
    out = []
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise UsageError(f"file not found: {p}", path=str(p))
        out.append(p)
    return out


def cmd_preprocess(args) -> int:
    paths = _check_files(args.prototypes)
    cfg = _config(args)
    clouds = [load_sample(p).cloud for p in paths]
    t = time.perf_counter()
    try:
        model = build_reference(clouds, cfg)
    except RegistrationFailed as exc:
        pid = exc.prototype_id
        _emit(_error(exc, path=str(paths[pid]) if pid is not None else None), sys.stderr)
        return EXIT_PARTIAL
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    _emit({"event": "preprocess", "model": str(out), "prototypes": [str(p) for p in paths],
           "clusters": model.cluster_sizes(), "centroid_detector": model.centroids.detector,
           "centroid_fallback": model.centroids.fallback,
           "registrations": list(model.registrations), "seconds": round(time.perf_counter() - t, 3),
           "config": cfg.to_dict()})
    return EXIT_OK


def cmd_infer(args) -> int:
    model_path = Path(args.model)
    if not model_path.is_file():
        raise UsageError(f"model file not found: {model_path}", path=str(model_path))
    model = load_model(model_path)
    cfg = _config(args, model.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(path: Path):
        try:
            if not path.is_file():
                raise UsageError(f"file not found: {path}", path=str(path))
            res = infer(load_sample(path).cloud, model, cfg)
            write_scores(out / f"{path.stem}.scores.rawa", res.point_scores)
            summary = {"id": path.stem, "input": str(path), **res.summary(), "config": cfg.to_dict()}
            (out / f"{path.stem}.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
            return {"event": "infer", "id": path.stem, "object_score": res.object_score,
                    "object_scores": res.object_scores, "fitness": res.fitness}
        except (KgadError, UsageError, OSError) as exc:
            rec = _error(exc, path=str(path), id=path.stem)
            (out / f"{path.stem}.error.json").write_text(json.dumps(rec, sort_keys=True) + "\n")
            return rec

    paths = [Path(p) for p in args.tests]
    if cfg.n_jobs > 1 and len(paths) > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_jobs) as pool:
            records = list(pool.map(one, paths))
    else:
        records = [one(p) for p in paths]
    failed = 0
    for rec in records:
        is_err = "error" in rec
        failed += is_err
        _emit(rec, sys.stderr if is_err else sys.stdout)
    return EXIT_PARTIAL if failed else EXIT_OK


def _load_labels(source: Path, mask_property: str):
    """``{id: (label, mask or None)}`` from a JSON file or a directory of clouds."""
    if source.is_file() and source.suffix.lower() == ".json":
        try:
            raw = json.loads(source.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"cannot parse labels file {source}: {exc}", path=str(source)) from None
        return {str(k): (int(v if not isinstance(v, dict) else v["label"]), None) for k, v in raw.items()}
    if source.is_dir():
        out = {}
        for p in sorted(source.iterdir()):
            if p.suffix.lower() in CLOUD_SUFFIXES:
                s = load_sample(p, mask_property=mask_property)
                out[p.stem] = (s.object_label, s.point_mask)
            elif p.name == "labels.json":
                for k, v in json.loads(p.read_text()).items():
                    mask = out.get(k, (None, None))[1]
                    out[k] = (int(v), mask)
        return out
    raise UsageError(f"labels source not found: {source}", path=str(source))


def cmd_evaluate(args) -> int:
    scores_dir = Path(args.scores)
    if not scores_dir.is_dir():
        raise UsageError(f"scores directory not found: {scores_dir}", path=str(scores_dir))
    summaries = {p.stem: p for p in sorted(scores_dir.glob("*.json")) if not p.name.endswith(".error.json")}
    if not summaries:
        raise UsageError(f"no score summaries in {scores_dir}", path=str(scores_dir))
    labels = _load_labels(Path(args.labels), args.mask_property)
    orphans_scores = sorted(set(summaries) - set(labels))
    orphans_labels = sorted(set(labels) - set(summaries))
    if orphans_scores or orphans_labels:
        raise UsageError("sample ids do not match", scores_without_labels=orphans_scores,
                         labels_without_scores=orphans_labels)
    ids = sorted(summaries)
    y, obj, masks, pts, per_obj = [], [], [], [], {}
    for i in ids:
        s = json.loads(summaries[i].read_text())
        agg = args.aggregation or s.get("aggregation", "eq14")
        val = s.get("object_scores", {}).get(agg, s.get("object_score"))
        if val is None:
            raise UsageError(f"summary {summaries[i]} has no object score", path=str(summaries[i]))
        y.append(labels[i][0])
        obj.append(float(val))
        mask = labels[i][1]
        score_file = scores_dir / f"{i}.scores.rawa"
        if mask is not None and score_file.is_file():
            ps = read_scores(score_file)
            if ps.shape[0] != mask.shape[0]:
                raise UsageError(f"{i}: {ps.shape[0]} scores for {mask.shape[0]} mask entries", id=i)
            masks.append(mask)
            pts.append(ps)
            if 0 < mask.sum() < mask.size:
                per_obj[i] = auroc(mask, ps)
    report = {"n_samples": len(ids), "aggregation": args.aggregation, "o_auroc": None,
              "p_auroc_mean": float(np.mean(list(per_obj.values()))) if per_obj else None,
              "p_auroc_per_object": per_obj, "p_auroc_global": None}
    try:
        report["o_auroc"] = auroc(y, obj)
    except KgadError as exc:
        report["o_auroc_error"] = str(exc)
    if masks and any(m.any() for m in masks) and not all(m.all() for m in masks):
        report["p_auroc_global"] = point_auroc(masks, pts, "global")
    text = json.dumps(report, sort_keys=True, indent=1) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    grid = BenchmarkGrid()
    if args.grid:
        path = Path(args.grid)
        if not path.is_file():
            raise UsageError(f"grid file not found: {path}", path=str(path))
        text = path.read_text(encoding="utf-8")
        try:
            parser = configparser.ConfigParser(interpolation=None)
            parser.read_string(text)
        except configparser.Error as exc:
            raise UsageError(f"cannot parse grid {path}: {exc}", path=str(path)) from None
        if parser.has_section("grid"):
            grid = BenchmarkGrid.from_section(parser["grid"])
        if parser.has_section("run") and not args.config:
            args.config = str(path)
    cfg = _config(args)
    seeds = [args.seed] if args.seed is not None else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_benchmark(cfg, grid, seeds=seeds, n_jobs=cfg.n_jobs,
                           data_dir=None if args.no_data else out / "data")
    report.write(out)
    (out / "effective_config.ini").write_text(cfg.dumps() + "\n" + grid.dumps())
    for row in report.rows:
        _emit({"event": "cell", **{k: row[k] for k in ("shape", "magnitude", "seed", "detector", "sampling",
                                                       "features", "o_auroc", "p_auroc", "status")}})
    return EXIT_PARTIAL if report.errors() else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with a [run] section")
    common.add_argument("--seed", type=int)
    common.add_argument("--detector", choices=["iss", "harris3d", "none"])
    common.add_argument("--sampling", choices=["us", "rs", "fs"])
    common.add_argument("--features", choices=["raw", "fpfh", "raw+fpfh"])
    common.add_argument("--aggregation", choices=["eq14", "max"])
    common.add_argument("--jobs", type=int, metavar="N")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="kgad", description="Keypoint-guided point cloud anomaly detection")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="build a reference model from prototypes")
    p.add_argument("prototypes", nargs="+")
    p.add_argument("--out", required=True, help="model file to write")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("infer", parents=[common], help="score test clouds")
    p.add_argument("tests", nargs="+")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="directory for score files")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", parents=[common], help="compute O-AUROC and P-AUROC")
    p.add_argument("--scores", required=True, help="directory written by 'infer'")
    p.add_argument("--labels", required=True, help="labels JSON or directory of labelled clouds")
    p.add_argument("--mask-property", default="anomaly")
    p.add_argument("--out", help="metrics JSON to write")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic data and run the benchmark")
    p.add_argument("--grid", help="INI file with a [grid] (and optional [run]) section")
    p.add_argument("--out", required=True)
    p.add_argument("--no-data", action="store_true", help="skip writing the dataset files")
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.jobs is not None and args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except (UsageError, InvalidArgument, ParseError) as exc:
        _emit(_error(exc), sys.stderr)
        return EXIT_USAGE
    except KgadError as exc:
        _emit(_error(exc), sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())

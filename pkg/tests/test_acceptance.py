"""End-to-end acceptance checks at their stated tolerances.

Each test appends one "[criterion N] PASS/FAIL ..." line that is printed in
the terminal summary, so a single pytest run reports every criterion.
"""

import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from kgad.benchmark import BenchmarkGrid, run_benchmark
from kgad.cli import main
from kgad.config import RunConfig
from kgad.descriptors import fpfh_features
from kgad.geometry import PointCloud, RigidTransform, estimate_normals, random_rotation
from kgad.metrics import auroc, pairwise_auroc
from kgad.pipeline import assign_clusters, build_reference, infer, interpolate_scores, score_points
from kgad.registration import icp_point_to_plane, point_to_plane_loss, register
from kgad.synthetic import DefectSpec, inject_defect, synth_object

import conftest
from test_descriptors import random_oriented_cloud, ref_fpfh
from test_pipeline import brute_assign, brute_interp, brute_scores, manual_model

pytestmark = pytest.mark.slow


def record(n, ok, detail):
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# --- 1: registration recovery ---------------------------------------------------

def test_criterion_1_registration_recovery():
    cfg = RunConfig().registration_config()
    diameter = synth_object("blend", 20000, 0.0, 0).diameter()
    sigma = 0.002 * diameter
    dst = synth_object("blend", 20000, sigma, 1)
    rng = np.random.default_rng(2024)
    ok, worst_time, worst_rot, worst_tr = 0, 0.0, 0.0, 0.0
    for case in range(100):
        R = random_rotation(rng, np.deg2rad(60))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        T = RigidTransform(R, direction * rng.uniform(0.0, 0.5) * diameter)
        src = synth_object("blend", 20000, sigma, 1000 + case).transformed(T)
        t = time.perf_counter()
        res = register(src, dst, cfg)  # target features are rebuilt inside the timed call
        worst_time = max(worst_time, time.perf_counter() - t)
        rot = res.transform.rotation_error(T.inverse())
        tr = res.transform.translation_error(T.inverse()) / diameter
        ok += rot < 1e-2 and tr < 1e-2
        if rot < 1e-2 and tr < 1e-2:
            worst_rot, worst_tr = max(worst_rot, rot), max(worst_tr, tr)
    passed = ok >= 95 and worst_time <= 5.0
    record(1, passed, f"registration: {ok}/100 recovered (need >= 95); slowest case {worst_time:.2f} s "
                      f"(limit 5 s); worst recovered rot {worst_rot:.2e}, trans {worst_tr:.2e} diam")
    assert passed


# --- 2: FPFH oracle -------------------------------------------------------------

def test_criterion_2_fpfh_oracle():
    worst = 0.0
    for seed in range(10):
        c = random_oriented_cloud(500 + seed, n=200)
        got = fpfh_features(c, radius=0.45)
        ref, _ = ref_fpfh(c.points, c.normals, 0.45)
        worst = max(worst, float(np.max(np.abs(got.rows - ref))))
    passed = worst <= 1e-6
    record(2, passed, f"FPFH vs direct formula on 10 clouds of 200 points: max bin error {worst:.2e} (limit 1e-6)")
    assert passed


# --- 3: scoring oracles ------------------------------------------------------------

def test_criterion_3_scoring_oracles():
    rng = np.random.default_rng(33)
    assign_ok = score_ok = interp_ok = 0
    worst_s = worst_i = 0.0
    for trial in range(50):
        n = int(rng.integers(200, 2001))
        cen = rng.normal(size=(5, 3))
        pts = rng.normal(size=(n, 3))
        lab = assign_clusters(pts, cen)
        assign_ok += np.array_equal(lab, brute_assign(pts, cen))

        bank_pts = rng.normal(size=(n, 3))
        bl = assign_clusters(bank_pts, cen)
        banks = [bank_pts[bl == j] for j in range(5)]
        model = manual_model(banks, cen, cfg=RunConfig(features="raw"))
        got = score_points(PointCloud(pts), model, "raw")
        s_star, _ = brute_scores(pts, lab, banks, 3)
        err = float(np.max(np.abs(got.nn_dist - s_star)))
        worst_s = max(worst_s, err)
        score_ok += err == 0.0

        work_idx = rng.choice(n, max(5, n // 10), replace=False)
        wl = lab[work_idx]
        ws = rng.uniform(size=len(work_idx))
        out = interpolate_scores(pts, pts[work_idx], ws, 3, lab, wl)
        err = float(np.max(np.abs(out - brute_interp(pts, lab, pts[work_idx], wl, ws, 3))))
        worst_i = max(worst_i, err)
        interp_ok += err == 0.0
    passed = assign_ok == score_ok == interp_ok == 50
    record(3, passed, f"oracles over 50 trials: assignment {assign_ok}/50 identical, s* {score_ok}/50 "
                      f"(max err {worst_s:.1e}), interpolation {interp_ok}/50 (max err {worst_i:.1e})")
    assert passed


# --- 4: AUROC -------------------------------------------------------------------

_auroc_mismatch = []


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 1000), st.integers(0, 2**32 - 1), st.integers(1, 50))
def _auroc_property(n, seed, levels):
    g = np.random.default_rng(seed)
    y = g.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = g.integers(0, levels, n).astype(float)  # few levels force many ties
    a, b = auroc(y, s), pairwise_auroc(y, s)
    if abs(a - b) > 1e-12:
        _auroc_mismatch.append((n, seed, levels, a, b))


def test_criterion_4_auroc_exactness():
    _auroc_property()
    fixture = auroc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8])
    passed = not _auroc_mismatch and fixture == 0.75
    record(4, passed, f"AUROC vs pairwise definition on 300 random inputs (<= 1000 labels): "
                      f"{len(_auroc_mismatch)} mismatches; 4-sample fixture = {fixture}")
    assert passed


# --- 5 and 6: synthetic benchmark ---------------------------------------------------

@pytest.fixture(scope="module")
def benchmark_report():
    grid = BenchmarkGrid(magnitudes=(0.0, 10.0), detectors=("iss", "none"), seeds=(0, 1, 2))
    return run_benchmark(RunConfig(), grid)


def _cell_minutes(report, row):
    key = f"{row['shape']}|{row['magnitude']:g}|{row['seed']}|{row['detector']}|{row['sampling']}|{row['features']}"
    t = report.timings[key]
    n_inf = row["n_normal"] + 2 * row["n_defective"]  # both magnitudes are scored in the same cell
    return (t["generate_s"] + t["register_s"] + t["build_s"] + t["infer_s_per_sample"] * n_inf) / 60.0


def test_criterion_5_synthetic_end_to_end(benchmark_report):
    rep = benchmark_report
    assert rep.errors() == []
    rows = [r for r in rep.rows if r["detector"] == "iss"]
    strong = [r for r in rows if r["magnitude"] == 10.0]
    null = [r for r in rows if r["magnitude"] == 0.0]
    minutes = max(_cell_minutes(rep, r) for r in strong)
    o_max = [r["o_auroc_max"] for r in strong]
    o_eq14 = [r["o_auroc_eq14"] for r in strong]
    p = [r["p_auroc"] for r in strong]
    o_null = [r["o_auroc_max"] for r in null] + [r["o_auroc_eq14"] for r in null]
    passed = (min(o_max) >= 0.95 and min(p) >= 0.90 and all(abs(v - 0.5) <= 0.1 for v in o_null)
              and minutes <= 10.0)
    record(5, passed, f"Raw+FPFH+ISS+FS, 4 prototypes, 20+20 tests at 10 sigma, seeds 0-2: "
                      f"O-AUROC (max aggregation) {min(o_max):.3f}-{max(o_max):.3f} (need >= 0.95); "
                      f"mean P-AUROC {min(p):.3f}-{max(p):.3f} (need >= 0.90); magnitude-0 O-AUROC "
                      f"{min(o_null):.3f}-{max(o_null):.3f} (need 0.5 +- 0.1); slowest run {minutes:.1f} min "
                      f"(limit 10). Recorded, not gated: O-AUROC with eq14 aggregation "
                      f"{min(o_eq14):.3f}-{max(o_eq14):.3f}")
    assert passed


def test_criterion_6_keypoint_ablation(benchmark_report):
    strong = [r for r in benchmark_report.rows if r["magnitude"] == 10.0]
    iss = float(np.mean([r["p_auroc"] for r in strong if r["detector"] == "iss"]))
    fps = float(np.mean([r["p_auroc"] for r in strong if r["detector"] == "none"]))
    passed = iss >= fps - 0.02
    record(6, passed, f"mean P-AUROC over 3 seeds: ISS+FS {iss:.4f} vs FPS baseline {fps:.4f} "
                      f"(need >= baseline - 0.02)")
    assert passed


# --- 7: invariance suite ------------------------------------------------------------

def test_criterion_7_invariance_suite():
    # pipeline rank correlation under rigid motion, at the default scale
    diameter = synth_object("blend", 20000, 0.0, 0).diameter()
    sigma = 0.002 * diameter
    rng = np.random.default_rng(77)
    protos = [synth_object("blend", 20000, sigma, 700 + i).transformed(conftest.random_pose(rng, diameter))
              for i in range(4)]
    model = build_reference(protos, RunConfig())
    clean = synth_object("blend", 20000, sigma, 799, return_normals=True)
    test = inject_defect(clean, DefectSpec("dent", clean.points[123], 0.1 * diameter, 10 * sigma)).cloud
    T = RigidTransform(random_rotation(rng, np.pi / 3), [0.4, -0.3, 0.2])
    rho = spearmanr(infer(test, model).point_scores, infer(test.transformed(T), model).point_scores)[0]

    # FPFH rotation invariance
    c = estimate_normals(synth_object("blend", 3000, 0.003, 2), k=20)
    Tf = RigidTransform(random_rotation(rng), rng.normal(size=3))
    fpfh_err = float(np.max(np.abs(fpfh_features(c, 0.25).rows - fpfh_features(c.transformed(Tf), 0.25).rows)))

    # point-to-plane ICP loss never increases
    monotone = 0
    for seed in range(10):
        g = np.random.default_rng(seed)
        dst = estimate_normals(synth_object("blend", 3000, 0.0, seed), k=20)
        src = synth_object("blend", 3000, 0.002, seed + 100).transformed(
            RigidTransform(random_rotation(g, 0.15), g.uniform(-0.08, 0.08, 3)))
        res = icp_point_to_plane(src, dst, max_iters=30, max_corr_dist=0.3)
        h = np.asarray(res.loss_history)
        final = point_to_plane_loss(src, dst, res.transform, 0.3)
        monotone += bool(np.all(np.diff(h) <= 0)) and abs(h[-1] - final) <= 1e-9 * max(1.0, final)

    passed = rho >= 0.99 and fpfh_err <= 1e-5 and monotone == 10
    record(7, passed, f"pipeline Spearman under rigid motion {rho:.4f} (need >= 0.99); FPFH rotation "
                      f"error {fpfh_err:.1e} (limit 1e-5); ICP loss monotone in {monotone}/10 runs")
    assert passed


# --- 8: determinism ----------------------------------------------------------------

GRID_INI = """[run]
prototype_points = 5000
test_points = 500
cluster_size = 1000
feature_points = 1500

[grid]
magnitudes = 0.0, 10.0
n_prototypes = 4
n_normal = 6
n_defective = 6
n_points = 5000
seeds = 3
"""


def test_criterion_8_determinism(tmp_path, capsys):
    (tmp_path / "grid.ini").write_text(GRID_INI)
    codes = [main(["synth", "--grid", str(tmp_path / "grid.ini"), "--out", str(tmp_path / name), "--no-data"])
             for name in ("a", "b")]
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("report.jsonl", "report.md", "effective_config.ini")}
    passed = codes == [0, 0] and all(same.values())
    record(8, passed, f"two synth runs with identical config and seed: exit codes {codes}; "
                      f"byte-identical {sorted(k for k, v in same.items() if v)}")
    assert passed

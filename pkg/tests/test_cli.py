import json

import numpy as np
import pytest

from kgad.cli import main
from kgad.dataset import LabeledSample, load_sample, read_scores, save_sample, write_scores
from kgad.synthetic import DefectSpec, inject_defect, synth_object

RUN_INI = """[run]
prototype_points = 3000
test_points = 400
cluster_size = 600
feature_points = 1200
detector = none
"""

GRID_INI = RUN_INI + """
[grid]
magnitudes = 0.0, 20.0
n_prototypes = 2
n_normal = 3
n_defective = 3
n_points = 3000
"""


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.ini").write_text(RUN_INI)
    for i in range(2):
        save_sample(root / f"proto{i}.ply", LabeledSample(synth_object("blend", 3000, 0.004, i)))
    clean = synth_object("blend", 3000, 0.004, 20, return_normals=True)
    bad = inject_defect(clean, DefectSpec("bump", clean.points[0], 0.25, 0.1))
    save_sample(root / "good.ply", LabeledSample(clean.with_normals(None), 0, np.zeros(3000, bool)))
    save_sample(root / "bad.ply", bad)
    (root / "corrupt.ply").write_bytes(b"ply\nformat ascii 1.0\nelement vertex 5\nend_header\n1 2\n")
    model = root / "model.kgad"
    code = main(["preprocess", str(root / "proto0.ply"), str(root / "proto1.ply"),
                 "--out", str(model), "--config", str(root / "run.ini")])
    assert code == 0
    return root


def test_preprocess_writes_model(workspace, capsys):
    assert (workspace / "model.kgad").stat().st_size > 0


def test_infer_writes_scores_and_summary(workspace, tmp_path, capsys):
    out = tmp_path / "scores"
    code = main(["infer", str(workspace / "good.ply"), str(workspace / "bad.ply"),
                 "--model", str(workspace / "model.kgad"), "--out", str(out)])
    assert code == 0
    assert len(read_scores(out / "bad.scores.rawa")) == 3000
    summary = json.loads((out / "bad.json").read_text())
    assert {"object_score", "object_scores", "fitness", "clusters"} <= set(summary)


def test_corrupt_file_gives_partial_failure(workspace, tmp_path, capsys):
    out = tmp_path / "scores"
    code = main(["infer", str(workspace / "good.ply"), str(workspace / "corrupt.ply"),
                 str(workspace / "bad.ply"), "--model", str(workspace / "model.kgad"), "--out", str(out)])
    assert code == 1
    assert (out / "good.scores.rawa").exists() and (out / "bad.scores.rawa").exists()
    err = json.loads((out / "corrupt.error.json").read_text())
    assert err["error"] == "ParseError" and "corrupt.ply" in err["path"]
    assert "ParseError" in capsys.readouterr().err


def test_evaluate_with_directory_labels(workspace, tmp_path, capsys):
    out = tmp_path / "scores"
    main(["infer", str(workspace / "good.ply"), str(workspace / "bad.ply"),
          "--model", str(workspace / "model.kgad"), "--out", str(out)])
    labels = tmp_path / "labels"
    labels.mkdir()
    for name in ("good", "bad"):
        (labels / f"{name}.ply").write_bytes((workspace / f"{name}.ply").read_bytes())
    capsys.readouterr()
    assert main(["evaluate", "--scores", str(out), "--labels", str(labels)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["o_auroc"] == 1.0
    assert report["p_auroc_per_object"]["bad"] > 0.9


def test_evaluate_four_sample_example(tmp_path, capsys):
    scores = tmp_path / "s"
    scores.mkdir()
    values = {"a": 0.1, "b": 0.4, "c": 0.35, "d": 0.8}
    for k, v in values.items():
        (scores / f"{k}.json").write_text(json.dumps({"object_score": v, "object_scores": {"eq14": v}}))
    (tmp_path / "labels.json").write_text(json.dumps({"a": 0, "b": 0, "c": 1, "d": 1}))
    out = tmp_path / "metrics.json"
    assert main(["evaluate", "--scores", str(scores), "--labels", str(tmp_path / "labels.json"),
                 "--out", str(out)]) == 0
    assert json.loads(out.read_text())["o_auroc"] == pytest.approx(0.75)


def test_evaluate_orphans_are_usage_errors(tmp_path, capsys):
    scores = tmp_path / "s"
    scores.mkdir()
    (scores / "a.json").write_text(json.dumps({"object_score": 1.0}))
    (tmp_path / "labels.json").write_text(json.dumps({"a": 0, "z": 1}))
    assert main(["evaluate", "--scores", str(scores), "--labels", str(tmp_path / "labels.json")]) == 2
    err = last_json(capsys.readouterr().err)
    assert err["labels_without_scores"] == ["z"]


def test_evaluate_empty_dir(tmp_path, capsys):
    (tmp_path / "s").mkdir()
    (tmp_path / "labels.json").write_text("{}")
    assert main(["evaluate", "--scores", str(tmp_path / "s"), "--labels", str(tmp_path / "labels.json")]) == 2


def test_usage_errors(tmp_path, capsys):
    assert main([]) == 2
    assert main(["infer", "x.ply", "--model", str(tmp_path / "none.kgad"), "--out", str(tmp_path)]) == 2
    assert main(["preprocess", str(tmp_path / "missing.ply"), "--out", str(tmp_path / "m")]) == 2
    assert main(["preprocess", "a.ply", "--out", "m", "--detector", "sift"]) == 2
    (tmp_path / "p.ply").write_bytes(b"garbage")
    assert main(["preprocess", str(tmp_path / "p.ply"), "--out", str(tmp_path / "m")]) == 2
    assert main(["infer", "x.ply", "--model", str(tmp_path / "p.ply"), "--out", str(tmp_path)]) == 2


def test_registration_failure_exit_code(workspace, tmp_path, capsys):
    save_sample(tmp_path / "cube.ply", LabeledSample(synth_object("cube", 3000, 0.0, 0)))
    (tmp_path / "strict.ini").write_text(RUN_INI + "min_fitness = 0.95\n")
    code = main(["preprocess", str(workspace / "proto0.ply"), str(tmp_path / "cube.ply"),
                 "--out", str(tmp_path / "m.kgad"), "--config", str(tmp_path / "strict.ini")])
    assert code == 1
    err = last_json(capsys.readouterr().err)
    assert err["error"] == "RegistrationFailed" and err["prototype_id"] == 1
    assert "cube.ply" in err["path"]


def test_synth_is_deterministic(tmp_path, capsys):
    (tmp_path / "grid.ini").write_text(GRID_INI)
    outs = []
    for name in ("a", "b"):
        assert main(["synth", "--grid", str(tmp_path / "grid.ini"), "--out", str(tmp_path / name)]) == 0
        outs.append(tmp_path / name)
    for f in ("report.jsonl", "report.md", "effective_config.ini"):
        assert (outs[0] / f).read_text() == (outs[1] / f).read_text()
    rows = [json.loads(l) for l in (outs[0] / "report.jsonl").read_text().splitlines()]
    assert [r["magnitude"] for r in rows] == [0.0, 20.0]
    assert rows[0]["o_auroc"] == 0.5
    assert rows[1]["o_auroc_max"] >= rows[0]["o_auroc_max"]
    tests = outs[0] / "data" / "blend" / "seed0" / "tests" / "mag20"
    labels = json.loads((tests / "labels.json").read_text())
    assert sum(labels.values()) == 3 and len(labels) == 6
    assert load_sample(tests / "defect_00.ply").point_mask.any()

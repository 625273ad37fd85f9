import numpy as np
import pytest

from kgad.benchmark import BenchmarkGrid, RegistrationCache, make_group, run_benchmark
from kgad.config import RunConfig
from kgad.exceptions import InvalidArgument
from kgad.registration import RegistrationTarget
from kgad.synthetic import synth_object

TINY = dict(n_prototypes=2, n_normal=4, n_defective=4, n_points=3000)


def tiny_cfg():
    return RunConfig(prototype_points=3000, test_points=400, cluster_size=600, feature_points=1200,
                     detector="none")


def test_grid_round_trip():
    g = BenchmarkGrid(shapes=("blend", "torus"), magnitudes=(0.0, 2.5), seeds=(3, 4), n_points=5000)
    assert BenchmarkGrid.loads(g.dumps()) == g


def test_grid_validation():
    with pytest.raises(InvalidArgument):
        BenchmarkGrid(n_normal=2, n_defective=3)
    with pytest.raises(InvalidArgument):
        BenchmarkGrid(magnitudes=(-1.0,))
    with pytest.raises(InvalidArgument):
        BenchmarkGrid.loads("[grid]\nwat = 1\n")


def test_paired_design():
    g = BenchmarkGrid(magnitudes=(0.0, 5.0), **TINY)
    group = make_group("blend", 0, g)
    for normal, defect in zip(group.normals, group.defects[0.0]):
        # magnitude 0 reproduces the normal test exactly
        np.testing.assert_array_equal(normal.cloud.points, defect.cloud.points)
        assert not defect.point_mask.any()
    for normal, defect in zip(group.normals, group.defects[5.0]):
        moved = np.any(normal.cloud.points != defect.cloud.points, axis=1)
        assert moved.any()
        np.testing.assert_array_equal(moved, defect.point_mask)


def test_group_is_deterministic():
    g = BenchmarkGrid(**TINY)
    a, b = make_group("sphere", 2, g), make_group("sphere", 2, g)
    np.testing.assert_array_equal(a.prototypes[1].points, b.prototypes[1].points)
    np.testing.assert_array_equal(a.defects[10.0][0].cloud.points, b.defects[10.0][0].cloud.points)


def test_registration_cache_on_disk(tmp_path):
    dst = synth_object("blend", 3000, 0.0, 0)
    cfg = tiny_cfg().registration_config()
    target = RegistrationTarget(dst, cfg)
    src = synth_object("blend", 3000, 0.004, 1)
    first = RegistrationCache(tmp_path).get(src, target)
    assert len(list(tmp_path.iterdir())) == 1
    again = RegistrationCache(tmp_path).get(src, target)
    np.testing.assert_allclose(again.transform.as_matrix(), first.transform.as_matrix(), atol=1e-12)
    assert again.fitness == pytest.approx(first.fitness)


def test_magnitude_monotonicity():
    g = BenchmarkGrid(magnitudes=(0.0, 5.0, 20.0), **TINY)
    rep = run_benchmark(tiny_cfg().replace(aggregation="max"), g)
    by_mag = {r["magnitude"]: r for r in rep.rows}
    assert by_mag[0.0]["o_auroc"] == 0.5
    assert by_mag[0.0]["p_auroc"] is None
    assert by_mag[5.0]["p_auroc"] <= by_mag[20.0]["p_auroc"]
    assert by_mag[20.0]["o_auroc"] >= by_mag[0.0]["o_auroc"]
    assert "Mean over seeds" in rep.to_markdown()
    assert rep.errors() == []

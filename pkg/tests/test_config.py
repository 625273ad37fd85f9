import pytest

from kgad.config import RunConfig
from kgad.exceptions import InvalidArgument


def test_defaults():
    cfg = RunConfig()
    assert (cfg.prototype_points, cfg.test_points, cfg.num_keypoints) == (20000, 1000, 5)
    assert (cfg.interp_k, cfg.reweight_k, cfg.fusion_lambda) == (3, 3, 0.01)
    assert cfg.feature_kinds == ("raw", "fpfh")


def test_ini_round_trip(tmp_path):
    cfg = RunConfig(detector="harris3d", sampling="rs", fusion_lambda=0.2, mutual_filter=True, seed=9)
    cfg.save(tmp_path / "c.ini")
    assert RunConfig.load(tmp_path / "c.ini") == cfg
    assert RunConfig.loads(cfg.dumps()) == cfg


def test_partial_file_keeps_defaults():
    cfg = RunConfig.loads("[run]\ndetector = none\ntest_points = 200\n")
    assert cfg.detector == "none" and cfg.test_points == 200 and cfg.cluster_size == 4000


@pytest.mark.parametrize("text", [
    "[run]\nbogus = 1\n",
    "[run]\ntest_points = many\n",
    "[other]\nx = 1\n",
    "[run]\nfusion_lambda = 2\n",
    "[run]\ndetector = sift\n",
])
def test_bad_files_rejected(text):
    with pytest.raises(InvalidArgument):
        RunConfig.loads(text)


def test_replace_validates():
    with pytest.raises(InvalidArgument):
        RunConfig().replace(interp_k=0)
    with pytest.raises(InvalidArgument):
        RunConfig(min_fitness=1.5)

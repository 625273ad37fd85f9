import json
import warnings

import numpy as np
import pytest

from kgad.dataset import (
    LabeledSample,
    load_sample,
    read_raw_array,
    read_scores,
    save_sample,
    write_raw_array,
    write_scores,
)
from kgad.exceptions import InvalidArgument, ParseError
from kgad.geometry import PointCloud
from kgad.synthetic import synth_object


@pytest.fixture
def sample():
    c = synth_object("blend", 500, 0.0, 0, return_normals=True)
    mask = np.zeros(500, bool)
    mask[:20] = True
    return LabeledSample(c, 1, mask, "s")


@pytest.mark.parametrize("suffix,binary", [(".ply", True), (".ply", False), (".rawa", True)])
def test_round_trip_with_mask(tmp_path, sample, suffix, binary):
    path = tmp_path / f"s{suffix}"
    save_sample(path, sample, binary=binary)
    back = load_sample(path)
    np.testing.assert_allclose(back.cloud.points, sample.cloud.points, atol=1e-12)
    np.testing.assert_allclose(back.cloud.normals, sample.cloud.normals, atol=1e-9)
    np.testing.assert_array_equal(back.point_mask, sample.point_mask)
    assert back.object_label == 1 and back.name == "s"


def test_pcd_round_trip(tmp_path, sample):
    save_sample(tmp_path / "s.pcd", sample)
    back = load_sample(tmp_path / "s.pcd")
    np.testing.assert_allclose(back.cloud.points, sample.cloud.points, atol=1e-15)
    assert back.point_mask is None


def test_custom_mask_property(tmp_path, sample):
    save_sample(tmp_path / "s.ply", sample, mask_property="gt")
    with pytest.warns(UserWarning, match="gt"):
        assert load_sample(tmp_path / "s.ply").point_mask is None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        back = load_sample(tmp_path / "s.ply", mask_property="gt")
    assert back.point_mask.sum() == 20


def test_unknown_ply_property_warns(tmp_path):
    text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n" \
           "property float z\nproperty uchar red\nend_header\n0 0 0 1\n1 1 1 2\n"
    (tmp_path / "c.ply").write_text(text)
    with pytest.warns(UserWarning, match="red"):
        s = load_sample(tmp_path / "c.ply")
    assert len(s.cloud) == 2


@pytest.mark.parametrize("text", [
    "not a ply",
    "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n"
    "end_header\n0 0 0\n1 1 1\n",
    "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n",
])
def test_malformed_ply(tmp_path, text):
    (tmp_path / "bad.ply").write_text(text)
    with pytest.raises(ParseError):
        load_sample(tmp_path / "bad.ply")


def test_truncated_binary_ply(tmp_path, sample):
    save_sample(tmp_path / "s.ply", sample)
    data = (tmp_path / "s.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(data[:-7])
    with pytest.raises(ParseError):
        load_sample(tmp_path / "t.ply")


def test_raw_array_header_and_errors(tmp_path):
    write_raw_array(tmp_path / "a.rawa", np.arange(6.0).reshape(3, 2), ["u", "v"])
    arr, header = read_raw_array(tmp_path / "a.rawa")
    assert header["columns"] == ["u", "v"] and arr.shape == (3, 2)
    data = (tmp_path / "a.rawa").read_bytes()
    (tmp_path / "b.rawa").write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(ParseError):
        read_raw_array(tmp_path / "b.rawa")
    (tmp_path / "c.rawa").write_bytes(data[:-4])
    with pytest.raises(ParseError):
        read_raw_array(tmp_path / "c.rawa")


def test_scores_are_float32(tmp_path):
    s = np.array([0.1, 2.5, 3.0])
    write_scores(tmp_path / "x.scores.rawa", s)
    np.testing.assert_allclose(read_scores(tmp_path / "x.scores.rawa"), s.astype(np.float32))


def test_labeled_sample_consistency():
    c = PointCloud(np.zeros((3, 3)))
    with pytest.raises(InvalidArgument):
        LabeledSample(c, 0, [1, 0, 0])
    with pytest.raises(InvalidArgument):
        LabeledSample(c, 1, [0, 0])


def test_unknown_suffix(tmp_path):
    with pytest.raises(InvalidArgument):
        load_sample(tmp_path / "x.obj")

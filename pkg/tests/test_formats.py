import json
import math

import numpy as np
import pytest

from mushpose.encoding import ImplicitEncoding, encode_gt
from mushpose.evaluation import EvalReport
from mushpose.formats import (
    FormatError,
    annotation_from_doc,
    annotation_to_doc,
    dump_json,
    encoding_from_doc,
    encoding_to_doc,
    load_json,
    poses_from_doc,
    poses_to_doc,
    read_ply,
    report_from_doc,
    report_to_doc,
    segmentation_from_doc,
    segmentation_to_doc,
    write_ply,
)
from mushpose.geometry import PointCloud, RotXY
from mushpose.pose import PoseEstimate
from mushpose.segmentation import Segmentation
from mushpose.synthesis import SceneConfig, generate_scene


def test_ply_binary_round_trip_bit_exact(tmp_path):
    pts = np.random.default_rng(0).normal(size=(1000, 3))
    write_ply(tmp_path / "a.ply", PointCloud(pts))
    assert read_ply(tmp_path / "a.ply").points.tobytes() == pts.tobytes()


def test_ply_ascii_round_trip_with_normals_and_colors(tmp_path):
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(50, 3))
    nrm = rng.normal(size=(50, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    cols = rng.integers(0, 256, size=(50, 3))
    write_ply(tmp_path / "a.ply", PointCloud(pts, nrm), colors=cols, binary=False)
    cloud, got = read_ply(tmp_path / "a.ply", with_colors=True)
    assert np.array_equal(cloud.points, pts)
    assert np.allclose(cloud.normals, nrm, atol=1e-15)
    assert np.array_equal(got, cols)


def test_ply_ascii_single_origin(tmp_path):
    p = tmp_path / "o.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
                 "property float z\nend_header\n0 0 0\n")
    assert np.array_equal(read_ply(p).points, [[0.0, 0.0, 0.0]])


def test_ply_unknown_property_warns(tmp_path):
    p = tmp_path / "u.ply"
    p.write_text("ply\nformat ascii 1.0\ncomment extra field\nelement vertex 2\nproperty double x\n"
                 "property double y\nproperty double intensity\nproperty double z\nend_header\n"
                 "1 2 9 3\n4 5 9 6\n")
    with pytest.warns(UserWarning, match="intensity"):
        cloud = read_ply(p)
    assert np.array_equal(cloud.points, [[1, 2, 3], [4, 5, 6]])


def test_ply_skips_preceding_element(tmp_path):
    p = tmp_path / "e.ply"
    p.write_text("ply\nformat ascii 1.0\nelement camera 1\nproperty float f\nelement vertex 1\n"
                 "property float x\nproperty float y\nproperty float z\nend_header\n7\n1 2 3\n")
    assert np.array_equal(read_ply(p).points, [[1, 2, 3]])


def test_ply_truncated_binary_reports_offset(tmp_path):
    p = tmp_path / "t.ply"
    write_ply(p, PointCloud(np.zeros((10, 3))))
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(FormatError, match="byte offset"):
        read_ply(p)


@pytest.mark.parametrize("text, pattern", [
    ("plx\nend_header\n", "magic"),
    ("ply\nformat ascii 1.0\nelement vertex x\nend_header\n", "byte offset"),
    ("ply\nformat ascii 1.0\nproperty float x\nend_header\n", "byte offset"),
    ("ply\nformat binary_big_endian 1.0\nend_header\n", "byte offset"),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n", "'z'"),
    ("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n"
     "end_header\n1 2 3\n", "byte offset"),
    ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n"
     "end_header\n1 two 3\n", "byte offset"),
])
def test_ply_malformed(tmp_path, text, pattern):
    p = tmp_path / "bad.ply"
    p.write_text(text)
    with pytest.raises(FormatError, match=pattern):
        read_ply(p)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneConfig(seed=6, n_mushrooms=(5, 5)))


def _roundtrip(tmp_path, doc, kind):
    path = tmp_path / f"{kind}.json"
    dump_json(path, doc)
    return load_json(path, kind)


def test_annotation_round_trip(tmp_path, scene):
    cloud, ann = scene
    back = annotation_from_doc(_roundtrip(tmp_path, annotation_to_doc(ann), "annotation"), n_points=len(cloud))
    assert np.array_equal(back.point_label, ann.point_label)
    assert np.array_equal(back.seg_label, ann.seg_label)
    assert len(back.mushrooms) == len(ann.mushrooms)
    for a, b in zip(ann.mushrooms, back.mushrooms):
        assert a.id == b.id and a.rot == b.rot and a.obb == b.obb and a.spin == b.spin
        assert np.array_equal(a.center, b.center)
        assert np.array_equal(a.per_axis_scales, b.per_axis_scales)
        assert np.array_equal(a.cap_point_indices, b.cap_point_indices)
        assert (a.scale_s, a.scale_z) == (b.scale_s, b.scale_z)


def test_encoding_round_trip_lengths(tmp_path, scene):
    cloud, ann = scene
    enc = encode_gt(cloud, ann)
    doc = encoding_to_doc(enc)
    assert len(doc["existence"]) == len(doc["residual"]) == len(doc["orientation"]) == len(cloud)
    back = encoding_from_doc(_roundtrip(tmp_path, doc, "encoding"), n_points=len(cloud))
    assert np.array_equal(back.residual, enc.residual)
    assert np.array_equal(back.orientation, enc.orientation)


def test_encoding_truncated_names_field(scene):
    cloud, ann = scene
    doc = encoding_to_doc(encode_gt(cloud, ann))
    doc["orientation"] = doc["orientation"][:-3]
    with pytest.raises(FormatError, match="'orientation'"):
        encoding_from_doc(doc, n_points=len(cloud))


def test_annotation_truncated_names_field(scene):
    cloud, ann = scene
    doc = annotation_to_doc(ann)
    doc["point_label"] = doc["point_label"][:10]
    with pytest.raises(FormatError, match="'point_label'"):
        annotation_from_doc(doc, n_points=len(cloud))


def test_load_json_requires_version_and_kind(tmp_path):
    p = tmp_path / "x.json"
    p.write_text(json.dumps({"kind": "encoding"}))
    with pytest.raises(FormatError, match="schema_version"):
        load_json(p, "encoding")
    p.write_text(json.dumps({"schema_version": 1, "kind": "poses"}))
    with pytest.raises(FormatError, match="kind"):
        load_json(p, "encoding")
    p.write_text('{"schema_version": 1, "kind": "encoding", "existence": [NaN]}')
    with pytest.raises(FormatError, match="NaN"):
        load_json(p, "encoding")


def test_dump_json_rejects_nan(tmp_path):
    with pytest.raises(ValueError):
        dump_json(tmp_path / "n.json", {"v": float("nan")})


def test_encoding_rejects_nonfinite():
    doc = encoding_to_doc(ImplicitEncoding(np.zeros(2), np.zeros((2, 3)), np.zeros(2)))
    doc["existence"] = [0.0, 1e400]
    with pytest.raises(FormatError, match="non-finite"):
        encoding_from_doc(doc)


def test_segmentation_round_trip_and_range(tmp_path):
    seg = Segmentation(np.array([0, 1, -1, 1]), 2)
    back = segmentation_from_doc(_roundtrip(tmp_path, segmentation_to_doc(seg), "segmentation"), n_points=4)
    assert np.array_equal(back.instance_id, seg.instance_id) and back.n_instances == 2
    bad = segmentation_to_doc(Segmentation(np.array([0, 3]), 2))
    with pytest.raises(FormatError):
        segmentation_from_doc(bad)


def test_poses_round_trip_with_degenerate(tmp_path):
    ok = PoseEstimate(np.array([1.0, 2, 3]), RotXY(0.1, -0.2), 1.1, 2.2 / 3, np.array([0.1, 0.2, 1.3]), 0.9, 40,
                      ("clamped",), {"s_z_raw": 0.7})
    bad = PoseEstimate(np.zeros(3), RotXY(), math.nan, math.nan, np.full(3, math.nan), 0.5, 3, ("degenerate",))
    back = poses_from_doc(_roundtrip(tmp_path, poses_to_doc([ok, bad]), "poses"))
    assert back[0].rot == ok.rot and back[0].scale_s == ok.scale_s and back[0].flags == ("clamped",)
    assert back[0].diagnostics == {"s_z_raw": 0.7}
    assert math.isnan(back[1].scale_s) and not back[1].ok


def test_poses_missing_scale_without_flag():
    doc = poses_to_doc([PoseEstimate(np.zeros(3), RotXY(), math.nan, math.nan, np.zeros(3), 1.0, 5)])
    with pytest.raises(FormatError, match="degenerate"):
        poses_from_doc(doc)


def test_report_round_trip(tmp_path):
    rep = EvalReport({0.25: 0.9, 0.5: 0.5}, None, None, None, 3, 0, 0)
    back = report_from_doc(_roundtrip(tmp_path, report_to_doc(rep), "report"))
    assert back == rep

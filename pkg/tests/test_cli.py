import filecmp
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mushpose.cli import main, parse_range
from mushpose.formats import read_ply


def run(*argv):
    return main([str(a) for a in argv])


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Five small scenes through gen, perturb (zero noise), segment, pose, eval."""
    root = tmp_path_factory.mktemp("ds")
    assert run("gen", "--scenes", 5, "--mushrooms", "3..6", "--seed", 7, "--undeformed", "--out", root) == 0
    assert run("encode", "--dataset", root) == 0
    assert run("perturb", "--dataset", root, "--sigma-r", 0, "--sigma-o", 0, "--flip", 0, "--seed", 1) == 0
    assert run("segment", "--dataset", root) == 0
    assert run("pose", "--dataset", root) == 0
    assert run("eval", "--dataset", root) == 0
    return root


def test_dataset_layout(pipeline):
    manifest = json.loads((pipeline / "manifest.json").read_text())
    assert manifest["kind"] == "manifest" and manifest["n_scenes"] == 5
    for i in range(5):
        scene = pipeline / f"scene_{i:04d}"
        for name in ("cloud.ply", "annotation.json", "encoding.json", "prediction.json", "segmentation.json",
                     "poses.json"):
            assert (scene / name).is_file()
        n = len(read_ply(scene / "cloud.ply"))
        enc = json.loads((scene / "encoding.json").read_text())
        assert len(enc["existence"]) == n


def test_zero_noise_pipeline_perfect(pipeline, capsys):
    report = json.loads((pipeline / "report.json").read_text())
    assert report["map_per_threshold"]["0.25"] == 1.0
    assert report["map_per_threshold"]["0.5"] == 1.0
    assert run("eval", "--dataset", pipeline, "--out", pipeline / "r2.json") == 0
    assert "MAP@0.25" in capsys.readouterr().out


def test_gen_twice_byte_identical(pipeline, tmp_path):
    again = tmp_path / "again"
    assert run("gen", "--scenes", 5, "--mushrooms", "3..6", "--seed", 7, "--undeformed", "--out", again) == 0
    first = {k: v for k, v in tree_bytes(pipeline).items() if k.endswith(("cloud.ply", "annotation.json"))
             or k == "manifest.json"}
    assert tree_bytes(again) == first


def test_gen_from_manifest_and_jobs(pipeline, tmp_path):
    out = tmp_path / "regen"
    assert run("gen", "--from-manifest", pipeline / "manifest.json", "--out", out, "--jobs", 2) == 0
    for i in range(5):
        name = f"scene_{i:04d}"
        for f in ("cloud.ply", "annotation.json"):
            assert filecmp.cmp(out / name / f, pipeline / name / f, shallow=False)


def test_rerun_stages_byte_identical(pipeline, tmp_path):
    before = tree_bytes(pipeline)
    assert run("perturb", "--dataset", pipeline, "--sigma-r", 0, "--sigma-o", 0, "--flip", 0, "--seed", 1) == 0
    assert run("segment", "--dataset", pipeline) == 0
    assert run("pose", "--dataset", pipeline) == 0
    assert run("eval", "--dataset", pipeline) == 0
    after = tree_bytes(pipeline)
    assert {k: after[k] for k in before} == before


def test_eval_empty_predictions(tmp_path, capsys):
    root = tmp_path / "empty"
    assert run("gen", "--scenes", 2, "--mushrooms", "3..3", "--seed", 2, "--out", root) == 0
    assert run("eval", "--dataset", root) == 0
    report = json.loads((root / "report.json").read_text())
    assert report["map_per_threshold"] == {"0.25": 0.0, "0.5": 0.0}
    assert report["mean_scale_rel_err"] is None and report["mean_theta_err_deg"] is None
    assert "absent" in capsys.readouterr().out


def test_seed_is_mandatory(tmp_path):
    with pytest.raises(SystemExit):
        run("gen", "--scenes", 1, "--out", tmp_path / "x")
    with pytest.raises(SystemExit):
        run("perturb", "--scene", tmp_path)


def test_errors_exit_nonzero(tmp_path, capsys):
    scene = tmp_path / "scene_0000"
    scene.mkdir()
    (scene / "cloud.ply").write_text("not a ply")
    assert run("segment", "--scene", scene) == 1
    assert "error:" in capsys.readouterr().err


def test_dbscan_and_icp_paths(pipeline, tmp_path):
    scene = pipeline / "scene_0000"
    assert run("segment", "--scene", scene, "--method", "dbscan", "--min-pts", 4) == 0
    assert run("pose", "--scene", scene, "--icp", "--outlier-filter") == 0
    poses = json.loads((scene / "poses.json").read_text())["poses"]
    assert all("icp_rms" in p["diagnostics"] for p in poses if "degenerate" not in p["flags"])
    # restore the default artifacts for other tests
    assert run("segment", "--scene", scene) == 0
    assert run("pose", "--scene", scene) == 0


def test_viz_exports_boxes(pipeline, tmp_path):
    scene = pipeline / "scene_0001"
    out = tmp_path / "viz.ply"
    assert run("viz", "--scene", scene, "--out", out, "--edge-samples", 10) == 0
    cloud, colors = read_ply(out, with_colors=True)
    n = len(read_ply(scene / "cloud.ply"))
    n_boxes = len(json.loads((scene / "poses.json").read_text())["poses"])
    assert len(cloud) == n + n_boxes * 12 * 10
    assert np.all(colors[n:] == [255, 0, 0])


def test_parse_range():
    assert parse_range("5..45") == (5, 45)
    assert parse_range("7") == (7, 7)


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mushpose", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen" in out.stdout

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mushpose.encoding import ImplicitEncoding, encode_gt
from mushpose.geometry import PointCloud
from mushpose.segmentation import Segmentation, dbscan, gap_relabel, gap_relabel_labels, meanshift, segment
from mushpose.synthesis import SceneConfig, generate_scene

from oracles import dbscan_reference, same_partition


def check_dbscan_against_reference(points, eps, min_pts):
    labels = dbscan(points, eps, min_pts)
    core, comp, border, noise = dbscan_reference(points, eps, min_pts)
    assert np.all(labels[noise] == -1)
    assert np.all(labels[~noise] >= 0)
    assert same_partition(labels[core], comp[core])
    # border points join some cluster owning a core neighbour
    d = np.linalg.norm(points[:, None] - points[None], axis=2)
    for i in np.flatnonzero(border):
        owners = set(labels[(d[i] <= eps) & core].tolist())
        assert labels[i] in owners


def test_gap_rule_examples():
    centers = np.array([[0.0, 0, 0], [2.0, 0, 0]])
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    # first point: d1 = d2 -> background; second: d1 = 1, d2 = 3 -> kept
    out = gap_relabel_labels(pts, [0, 0], centers)
    assert out.tolist() == [-1, 0]
    pts = np.array([[1.0, 0, 0]])
    centers = np.array([[0.0, 0, 0], [3.0, 0, 0]])
    # d1 = 1, d2 = 2 -> ratio 0.5, kept
    assert gap_relabel_labels(pts, [0], centers).tolist() == [0]


def test_gap_rule_single_center_noop():
    pts = np.random.default_rng(0).normal(size=(50, 3))
    labels = np.zeros(50, dtype=np.int64)
    assert np.array_equal(gap_relabel_labels(pts, labels, [[0, 0, 0]]), labels)


def test_gap_relabel_matches_annotation():
    cloud, ann = generate_scene(SceneConfig(seed=4, n_mushrooms=(8, 8)))
    assert np.array_equal(gap_relabel(cloud, ann), ann.seg_label)


def test_dbscan_two_blobs():
    rng = np.random.default_rng(1)
    eps = 0.5
    a = rng.normal(scale=0.1, size=(50, 3))
    b = a + [10 * eps + 1.0, 0, 0]
    labels = dbscan(np.vstack([a, b]), eps, 5)
    assert labels.max() == 1 and labels.min() == 0
    assert len(set(labels[:50])) == 1 and len(set(labels[50:])) == 1


def test_dbscan_all_noise():
    pts = np.arange(30, dtype=float)[:, None] * [1.0, 0, 0]
    assert np.all(dbscan(pts, 0.5, 2) == -1)


def test_dbscan_rejects_bad_params():
    with pytest.raises(ValueError):
        dbscan(np.zeros((3, 3)), 0.0, 2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.3), st.integers(2, 8))
def test_dbscan_matches_reference(seed, eps, min_pts):
    pts = np.random.default_rng(seed).random((300, 3))
    check_dbscan_against_reference(pts, eps, min_pts)


def test_meanshift_point_masses():
    bw = 0.5
    masses = np.array([[0, 0, 0], [5, 0, 0], [0, 5, 0]], float)
    pts = np.repeat(masses, 20, axis=0)
    labels, modes = meanshift(pts, bw)
    assert len(modes) == 3
    for m in masses:
        assert np.min(np.linalg.norm(modes - m, axis=1)) < 1e-12
    assert same_partition(labels, np.repeat([0, 1, 2], 20))


def test_meanshift_single_blob_many_seeds():
    sigma = 0.2
    for seed in range(20):
        pts = np.random.default_rng(seed).normal(scale=sigma, size=(300, 3))
        _, modes = meanshift(pts, 3 * sigma)
        assert len(modes) == 1


def test_meanshift_two_blobs_modes_near_means():
    bw = 0.5
    rng = np.random.default_rng(3)
    a = rng.normal(scale=0.08, size=(200, 3))
    b = rng.normal(scale=0.08, size=(200, 3)) + [6 * bw, 0, 0]
    labels, modes = meanshift(np.vstack([a, b]), bw)
    assert len(modes) == 2
    for blob in (a, b):
        assert np.min(np.linalg.norm(modes - blob.mean(axis=0), axis=1)) <= 0.1 * bw
    assert same_partition(labels, np.repeat([0, 1], 200))


def test_meanshift_empty():
    labels, modes = meanshift(np.zeros((0, 3)), 0.3)
    assert len(labels) == 0 and modes.shape == (0, 3)


def test_segmentation_from_labels_orders_by_size():
    seg = Segmentation.from_labels([5, 5, 2, 2, 2, -1, 9], min_size=2)
    assert seg.n_instances == 2
    assert seg.instance_id.tolist() == [1, 1, 0, 0, 0, -1, -1]


@pytest.fixture(scope="module")
def five_scene():
    cloud, ann, info = generate_scene(SceneConfig(seed=2, n_mushrooms=(5, 5)), return_info=True)
    return cloud, ann, info, encode_gt(cloud, ann)


def test_segment_meanshift_recovers_gt(five_scene):
    cloud, ann, _, enc = five_scene
    seg = segment(cloud, enc, method="meanshift", bandwidth=0.3)
    assert seg.n_instances == len(ann.mushrooms)
    assert same_partition(seg.instance_id, ann.seg_label)


def test_segment_no_existence_no_instances(five_scene):
    cloud, _, _, enc = five_scene
    empty = ImplicitEncoding(np.zeros(len(cloud)), enc.residual, enc.orientation)
    assert segment(cloud, empty).n_instances == 0
    assert segment(cloud, empty, method="dbscan").n_instances == 0


def _min_instance_gap(points, labels):
    from scipy.spatial import cKDTree

    best = np.inf
    ids = [k for k in np.unique(labels) if k >= 0]
    for k in ids:
        others = points[(labels >= 0) & (labels != k)]
        if len(others):
            d, _ = cKDTree(others).query(points[labels == k])
            best = min(best, d.min())
    return best


def test_segment_dbscan_counts_separated_scenes():
    checked = 0
    for seed in range(30, 36):
        cloud, ann, info = generate_scene(SceneConfig(seed=seed, n_mushrooms=(4, 8)), return_info=True)
        eps = 2.5 * info["voxel_size"]
        if _min_instance_gap(cloud.points, ann.seg_label) <= eps:
            continue
        enc = encode_gt(cloud, ann)
        seg = segment(cloud, enc, method="dbscan", eps=eps, min_pts=4, min_cluster_size=1)
        assert seg.n_instances == len(ann.mushrooms)
        checked += 1
    assert checked >= 2


def test_segment_rejects_unknown_method(five_scene):
    cloud, _, _, enc = five_scene
    with pytest.raises(ValueError):
        segment(cloud, enc, method="kmeans")

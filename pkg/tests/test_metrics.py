import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bodyrefine.mesh import TriMesh, icosphere
from bodyrefine.metrics import (
    CSV_COLUMNS, MetricReport, error_3d, evaluate, joint_error_2d, nearest_distances, silhouette_iou,
    write_csv,
)
from bodyrefine.render import WeakPerspectiveCamera, rasterize

masks = arrays(bool, (6, 7))


def brute_nn(query, points):
    d = np.sqrt(((query[:, None, :] - points[None, :, :]) ** 2).sum(axis=2))
    return d.min(axis=1)


def planar_patch(n_side, spacing=0.01):
    xs, ys = np.meshgrid(np.arange(n_side) * spacing, np.arange(n_side) * spacing)
    v = np.stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)], axis=1)
    faces = []
    for r in range(n_side - 1):
        for c in range(n_side - 1):
            i = r * n_side + c
            faces += [(i, i + 1, i + n_side + 1), (i, i + n_side + 1, i + n_side)]
    return TriMesh(v, np.array(faces))


# ---------------------------------------------------------------- IoU

def test_iou_hand_cases():
    a = np.ones((4, 4), bool)
    assert silhouette_iou(a, a) == 1.0
    left = np.zeros((4, 4), bool)
    left[:, :2] = True
    assert silhouette_iou(left, ~left) == 0.0
    s1 = np.array([[True, True, False]])
    s2 = np.array([[False, True, True]])
    assert silhouette_iou(s1, s2) == 1 / 3


@settings(max_examples=100)
@given(masks, masks)
def test_iou_symmetric_and_identity(a, b):
    assert silhouette_iou(a, b) == silhouette_iou(b, a)
    assert (silhouette_iou(a, b) == 1.0) == bool(np.array_equal(a, b))


def test_iou_shape_mismatch():
    with pytest.raises(ValueError):
        silhouette_iou(np.zeros((2, 2)), np.zeros((3, 2)))


# ---------------------------------------------------------------- joints

def test_joint_error_cases():
    gt = np.random.default_rng(0).uniform(0, 200, (10, 2))
    assert joint_error_2d(gt, gt)[0] == 0.0
    pred = gt.copy()
    pred[3] += (3, 4)
    mean, per = joint_error_2d(pred, gt)
    assert mean == pytest.approx(0.5)
    assert per[3] == pytest.approx(5.0)


def test_joint_error_skips_invalid():
    gt = np.zeros((10, 2))
    pred = np.zeros((10, 2))
    pred[0] = (100, 0)
    valid = np.ones(10, bool)
    valid[0] = False
    mean, per = joint_error_2d(pred, gt, valid)
    assert mean == 0.0 and np.isnan(per[0])
    with pytest.raises(ValueError):
        joint_error_2d(pred, gt, np.zeros(10, bool))


@settings(max_examples=30)
@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_joint_error_translation_invariant(tx, ty):
    rng = np.random.default_rng(1)
    gt = rng.uniform(0, 100, (10, 2))
    pred = gt + rng.normal(0, 3, (10, 2))
    t = np.array([tx, ty])
    assert joint_error_2d(pred + t, gt + t)[0] == pytest.approx(joint_error_2d(pred, gt)[0], rel=1e-9, abs=1e-9)


def test_joint_error_rayleigh_mean():
    sigma = 4.0
    rng = np.random.default_rng(2024)
    gt = np.zeros((10, 2))
    means = [joint_error_2d(gt + rng.normal(0, sigma, (10, 2)), gt)[0] for _ in range(10_000)]
    assert abs(np.mean(means) / (sigma * np.sqrt(np.pi / 2)) - 1) < 0.02


# ---------------------------------------------------------------- 3D error

def test_error_3d_identical_is_zero():
    m = icosphere(2)
    assert error_3d(m, m)[0] == 0.0


def test_error_3d_single_vertex_example():
    # a triangle collapsed onto the origin stands in for a single vertex
    gt = TriMesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
    pred = TriMesh(np.array([[1.0, 0, 0], [3.0, 0, 0], [1.0, 0, 0]]), np.array([[0, 1, 2]]))
    assert error_3d(pred, gt)[0] == pytest.approx(1000.0)


def test_error_3d_superset_is_zero():
    gt = icosphere(1)
    extra = icosphere(1, radius=2.0)
    pred = TriMesh(np.vstack([gt.vertices, extra.vertices]), np.vstack([gt.faces, extra.faces + gt.n_vertices]))
    assert error_3d(pred, gt)[0] == 0.0


def test_error_3d_translated_patch_matches_brute_force():
    gt = planar_patch(23)  # 529 vertices
    pred = gt.with_vertices(gt.vertices + [0.005, 0, 0])
    err, n = error_3d(pred, gt)
    ref = brute_nn(gt.vertices, pred.vertices)
    assert n == 529
    assert err == np.mean(ref) * 1000.0
    assert err == pytest.approx(5.0, abs=0.3)


@pytest.mark.parametrize("seed", range(5))
def test_nearest_distances_exact_vs_brute_force(seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(2000, 3))
    p = rng.normal(size=(1500, 3))
    assert np.array_equal(nearest_distances(q, p), brute_nn(q, p))


def test_visible_mode_counts_and_finiteness():
    gt = icosphere(3, radius=0.5)
    pred = gt.with_vertices(gt.vertices * 1.02)
    cam = WeakPerspectiveCamera(150.0, (112, 112), (224, 224))
    vis_err, n_vis = error_3d(pred, gt, "visible", cam)
    full_err, n_full = error_3d(pred, gt, "full")
    assert 0 < n_vis < n_full
    assert n_vis == rasterize(gt, cam).vertex_visibility.sum()
    assert np.isfinite(vis_err) and vis_err >= 0 and np.isfinite(full_err) and full_err >= 0
    with pytest.raises(ValueError):
        error_3d(pred, gt, "visible")


# ---------------------------------------------------------------- reports

def test_report_and_csv(tmp_path):
    m = icosphere(2, radius=0.5)
    cam = WeakPerspectiveCamera(150.0, (112, 112), (224, 224))
    sil = rasterize(m, cam).silhouette
    rep = evaluate(m, m, cam, sil)
    assert rep.sil_iou == 1.0 and rep.err3d_full_mm == 0.0 and rep.err3d_vis_mm == 0.0
    json.loads(rep.to_json())
    write_csv([rep.csv_row("img0")], tmp_path / "m.csv")
    with open(tmp_path / "m.csv") as fp:
        rows = list(csv.reader(fp))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert rows[1][0] == "img0"


def test_report_validation():
    with pytest.raises(ValueError):
        MetricReport(sil_iou=1.5)
    with pytest.raises(ValueError):
        MetricReport(err3d_full_mm=-1.0)

import numpy as np
import pytest

from bodyrefine.config import Config
from bodyrefine.fitting import (
    MARCH_STEP, FitInputs, FitState, Stage, StageOrderError, anchor_oracle, anchor_stage, bilinear_sample,
    joint_residuals, joint_stage, march_mismatch, run_pipeline, vertex_stage,
)
from bodyrefine.handles import ANCHOR_RADIUS, anchors_at, joint_positions
from bodyrefine.mesh import icosphere, subdivide_midpoint
from bodyrefine.metrics import silhouette_iou
from bodyrefine.render import WeakPerspectiveCamera, project, rasterize
from bodyrefine.template import body_proxy, proxy_metadata

from builders import disc_mask, ellipsoid_fixture, perturbed_pose_case, suite_camera

CAM100 = WeakPerspectiveCamera(100.0, (112.0, 112.0), (224, 224))


@pytest.fixture(scope="module")
def proxy():
    return body_proxy()


@pytest.fixture(scope="module")
def meta():
    return proxy_metadata()


# ---------------------------------------------------------------- stage bookkeeping

def test_stage_cannot_repeat_or_go_back(proxy, meta):
    st = FitState(proxy, CAM100)
    gt = project(CAM100, joint_positions(proxy, meta.groups))
    done = joint_stage(st, gt, np.ones(10, bool), meta.groups)
    assert done.stage == Stage.JOINT_DONE
    with pytest.raises(StageOrderError):
        joint_stage(done, gt, np.ones(10, bool), meta.groups)
    later = FitState(proxy, CAM100, Stage.ANCHOR_DONE)
    with pytest.raises(StageOrderError):
        joint_stage(later, gt, np.ones(10, bool), meta.groups)


# ---------------------------------------------------------------- joints

def test_joint_stage_zero_motion(proxy, meta):
    gt = project(CAM100, joint_positions(proxy, meta.groups))
    st = FitState(proxy, CAM100)
    assert all(r.motion_2d == (0.0, 0.0) for r in joint_residuals(st, gt, np.ones(10, bool), meta.groups))
    out = joint_stage(st, gt, np.ones(10, bool), meta.groups)
    assert np.abs(out.mesh.vertices - proxy.vertices).max() < 1e-9


def test_single_joint_displacement(proxy, meta):
    groups = meta.groups
    base = joint_positions(proxy, groups)
    gt = project(CAM100, base)
    k = [g.joint_name for g in groups].index("elbow_l")
    gt[k] += (10.0, 0.0)
    out = joint_stage(FitState(proxy, CAM100), gt, np.ones(10, bool), groups)
    moved = joint_positions(out.mesh, groups)
    assert np.allclose(moved[k] - base[k], (0.1, 0.0, 0.0), atol=5e-3)
    err = np.linalg.norm(project(CAM100, moved[k]) - gt[k])
    assert err < 1.0


def test_invalid_joints_are_skipped(proxy, meta):
    gt = project(CAM100, joint_positions(proxy, meta.groups))
    gt[0] = (np.nan, np.nan)
    valid = np.ones(10, bool)
    valid[0] = False
    out = joint_stage(FitState(proxy, CAM100), gt, valid, meta.groups)
    assert np.isfinite(out.mesh.vertices).all()
    assert len(joint_residuals(FitState(proxy, CAM100), gt, valid, meta.groups)) == 9
    with pytest.raises(ValueError):
        joint_stage(FitState(proxy, CAM100), gt, np.zeros(10, bool), meta.groups)


# ---------------------------------------------------------------- marching

def scalar_march(mesh_sil, gt_sil, origin, direction, radius_px, step=MARCH_STEP):
    """Sample-by-sample scan of the XOR region along +/- direction, one point at a time."""
    h, w = mesh_sil.shape

    def at(mask, p):
        c, r = int(np.floor(p[0])), int(np.floor(p[1]))
        return bool(mask[r, c]) if 0 <= c < w and 0 <= r < h else False

    n = int(np.floor(radius_px / step + 1e-9))

    def run(sign, leave, count):
        k, total = 0, 0
        while k <= n and leave(origin + sign * k * step * direction):
            k += 1
        while k <= n and count(origin + sign * k * step * direction):
            total += 1
            k += 1
        return total * step

    def xor(p):
        return at(mesh_sil, p) != at(gt_sil, p)

    grow = run(+1, lambda p: at(mesh_sil, p), lambda p: xor(p) and at(gt_sil, p))
    shrink = run(-1, lambda p: not at(mesh_sil, p), lambda p: xor(p) and at(mesh_sil, p))
    return grow if grow >= shrink else -shrink


def random_blob(rng, shape=(48, 48)):
    from scipy import ndimage
    m = ndimage.gaussian_filter(rng.random(shape), 3.0)
    return m > np.quantile(m, rng.uniform(0.3, 0.7))


@pytest.mark.parametrize("seed", range(50))
def test_march_matches_scalar_scan(seed):
    rng = np.random.default_rng(seed)
    mesh_sil, gt_sil = random_blob(rng), random_blob(rng)
    origins = rng.uniform(-2, 50, (40, 2))
    ang = rng.uniform(0, 2 * np.pi, 40)
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    radius = rng.uniform(3, 20)
    got = march_mismatch(mesh_sil, gt_sil, origins, dirs, radius)
    want = [scalar_march(mesh_sil, gt_sil, o, d, radius) for o, d in zip(origins, dirs)]
    assert np.array_equal(got, want)


def test_march_axis_aligned_counts_xor_pixels():
    mesh_sil = np.zeros((5, 30), bool)
    gt_sil = np.zeros((5, 30), bool)
    mesh_sil[:, :10] = True
    gt_sil[:, :17] = True  # 7 pixels of ground truth beyond the mesh edge
    o = np.array([[9.5, 2.5]])
    got = march_mismatch(mesh_sil, gt_sil, o, np.array([[1.0, 0.0]]), radius_px=20)
    assert got[0] == 7.0
    # shrink: mesh extends 4 pixels past the ground truth edge
    gt2 = np.zeros((5, 30), bool)
    gt2[:, :6] = True
    got = march_mismatch(mesh_sil, gt2, o, np.array([[1.0, 0.0]]), radius_px=20)
    assert got[0] == -4.0


# ---------------------------------------------------------------- anchor oracle

@pytest.fixture(scope="module")
def disc_setup():
    """Sphere of radius 0.5 m at 100 px/m: a 50 px disc, with anchors on its rim."""
    sphere = icosphere(4, radius=0.5)
    nz = sphere.normals[:, 2]
    rim = np.flatnonzero(np.abs(nz) < 0.05)
    return sphere, rim


def test_oracle_no_mismatch(disc_setup):
    sphere, rim = disc_setup
    sil = rasterize(sphere, CAM100).silhouette
    out = anchor_oracle(FitState(sphere, CAM100), sil, anchors_at(sphere, rim))
    assert not any(a.active for a in out)
    assert all(a.movement == 0.0 for a in out)


def test_oracle_grow_to_larger_disc(disc_setup):
    sphere, rim = disc_setup
    out = anchor_oracle(FitState(sphere, CAM100), disc_mask(60), anchors_at(sphere, rim))
    mv = np.array([a.movement for a in out])
    assert all(a.active for a in out)
    assert np.all(np.abs(mv - 0.10) <= 0.01)


def test_oracle_shrink_to_smaller_disc(disc_setup):
    sphere, rim = disc_setup
    out = anchor_oracle(FitState(sphere, CAM100), disc_mask(45), anchors_at(sphere, rim))
    mv = np.array([a.movement for a in out])
    assert np.all(np.abs(mv + 0.05) <= 0.01)


def test_oracle_far_and_frontal_anchors_inactive(disc_setup):
    sphere, _ = disc_setup
    front = np.flatnonzero(sphere.normals[:, 2] > 0.99)  # deep inside the disc and facing the camera
    out = anchor_oracle(FitState(sphere, CAM100), disc_mask(60), anchors_at(sphere, front))
    assert not any(a.active for a in out)


@pytest.mark.parametrize("seed", range(5))
def test_oracle_movements_bounded(seed, disc_setup):
    sphere, _ = disc_setup
    rng = np.random.default_rng(seed)
    gt = rng.random((224, 224)) < 0.5
    idx = rng.choice(sphere.n_vertices, 300, replace=False)
    for a in anchor_oracle(FitState(sphere, CAM100), gt, anchors_at(sphere, idx)):
        assert -ANCHOR_RADIUS <= a.movement <= ANCHOR_RADIUS
        if not a.active:
            assert a.movement == 0.0


# ---------------------------------------------------------------- anchor stage

def test_anchor_stage_matching_is_noop(disc_setup):
    sphere, rim = disc_setup
    sil = rasterize(sphere, CAM100).silhouette
    out = anchor_stage(FitState(sphere, CAM100), sil, rim)
    assert out.mesh is sphere


def test_anchor_stage_guard_with_noise(disc_setup):
    sphere, _ = disc_setup
    gt = np.random.default_rng(0).random((224, 224)) < 0.3
    before = silhouette_iou(rasterize(sphere, CAM100).silhouette, gt)
    out = anchor_stage(FitState(sphere, CAM100), gt, range(0, sphere.n_vertices, 10))
    assert silhouette_iou(rasterize(out.mesh, CAM100).silhouette, gt) >= before


def test_anchor_stage_ellipsoid():
    template, _, cam, gt = ellipsoid_fixture()
    from bodyrefine.handles import select_anchor_handles
    anchors = select_anchor_handles(template, (), 200, 0)
    before = silhouette_iou(rasterize(template, cam).silhouette, gt)
    out = anchor_stage(FitState(template, cam), gt, anchors, iters=3)
    after = silhouette_iou(rasterize(out.mesh, cam).silhouette, gt)
    assert 0.88 < before < 0.91
    assert after > 0.97


# ---------------------------------------------------------------- vertex stage

def test_bilinear_sample_reproduces_linear_field():
    yy, xx = np.mgrid[0:20, 0:30]
    img = 2.0 * (xx + 0.5) - 3.0 * (yy + 0.5) + 1.0
    uv = np.random.default_rng(0).uniform(1, 19, (100, 2))
    vals, ok = bilinear_sample(img, uv)
    assert ok.all()
    assert np.allclose(vals, 2 * uv[:, 0] - 3 * uv[:, 1] + 1)
    centre, _ = bilinear_sample(img, np.array([[4.5, 7.5]]))
    assert centre[0] == img[7, 4]


def test_vertex_stage_zero_detail():
    sphere = icosphere(3, radius=0.6)
    coarse = rasterize(subdivide_midpoint(sphere), CAM100).depth
    out = vertex_stage(FitState(sphere, CAM100), coarse)
    assert np.abs(out.mesh.vertices - subdivide_midpoint(sphere).vertices).max() < 1e-7


def test_vertex_stage_uniform_offset():
    sphere = icosphere(3, radius=0.6)
    sub = subdivide_midpoint(sphere)
    maps = rasterize(sub, CAM100)
    refined = np.where(maps.silhouette, maps.depth + 0.005, -np.inf)
    out = vertex_stage(FitState(sphere, CAM100), refined)
    dz = out.mesh.vertices[:, 2] - sub.vertices[:, 2]
    vis = maps.vertex_visibility
    assert abs(dz[vis].mean() - 0.005) < 5e-4
    assert np.abs(out.mesh.vertices[:, :2] - sub.vertices[:, :2]).max() < 1e-3
    iou = silhouette_iou(rasterize(out.mesh, CAM100).silhouette, maps.silhouette)
    assert iou > 0.999


def test_vertex_stage_shape_check():
    with pytest.raises(ValueError):
        vertex_stage(FitState(icosphere(1), CAM100), np.zeros((10, 10)))


# ---------------------------------------------------------------- pipeline

def test_pipeline_all_disabled(proxy, meta):
    cfg = Config({"stages.joint.enabled": False, "stages.anchor.enabled": False,
                  "stages.vertex.enabled": False})
    res = run_pipeline(proxy, CAM100, FitInputs(), cfg, meta, meta.anchors)
    assert res.state.mesh is proxy
    assert res.stage_meshes == {}
    assert len(res.report["snapshots"]) == 1
    assert all(s["status"] == "skipped" for s in res.report["stages"].values())


def test_pipeline_joint_plus_anchor_beats_joint_only(meta):
    template, _, sil, joints = perturbed_pose_case(3)
    cam = suite_camera()
    inputs = FitInputs(joints, np.ones(10, bool), sil)
    both = run_pipeline(template, cam, inputs, Config({"stages.vertex.enabled": False}), meta, meta.anchors)
    joint_only = run_pipeline(template, cam, inputs,
                              Config({"stages.vertex.enabled": False, "stages.anchor.enabled": False}),
                              meta, meta.anchors)
    assert both.report["snapshots"][-1]["sil_iou"] >= joint_only.report["snapshots"][-1]["sil_iou"]


def test_pipeline_ellipsoid_monotone_iou():
    template, _, cam, gt = ellipsoid_fixture()
    from bodyrefine.handles import select_anchor_handles
    anchors = [a.vertex_index for a in select_anchor_handles(template, (), 200, 0)]
    res = run_pipeline(template, cam, FitInputs(silhouette=gt), Config(), None, anchors)
    ious = [s["sil_iou"] for s in res.report["snapshots"]]
    assert res.report["stages"]["joint"]["status"] == "skipped"
    assert all(b >= a - 1e-3 for a, b in zip(ious, ious[1:]))
    assert ious[-1] > 0.97


def test_pipeline_is_deterministic(meta, tmp_path):
    from bodyrefine.mesh import save_mesh
    template, _, sil, joints = perturbed_pose_case(1)
    cam = suite_camera()
    inputs = FitInputs(joints, np.ones(10, bool), sil)
    outs = []
    for k in range(2):
        res = run_pipeline(template, cam, inputs, Config({"stages.vertex.enabled": False}), meta, meta.anchors)
        p = tmp_path / f"{k}.obj"
        save_mesh(res.state.mesh, p)
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]

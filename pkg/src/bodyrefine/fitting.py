"""Joint, anchor and vertex refinement stages and the pipeline that chains them.

Each stage projects the current mesh, derives handle motions directly from
the 2D evidence (joint annotations, silhouette mismatch, refined depth) and
applies them with a Laplacian edit.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .config import Config
from .deform import DeformProblem, deform_along_normals, solve_deform
from .handles import ANCHOR_RADIUS, JOINT_NAMES, AnchorHandle, anchors_at, joint_positions
from .mesh import TriMesh, build_laplacian, subdivide_midpoint
from .metrics import joint_error_2d, silhouette_iou
from .render import EPS_VIS, WeakPerspectiveCamera, project, rasterize
from .shading import (
    ShadingProblem, estimate_lighting, magnify_details, refine_depth,
)

logger = logging.getLogger(__name__)

MARCH_STEP = 0.5  # pixels


class Stage(enum.IntEnum):
    INITIAL = 0
    JOINT_DONE = 1
    ANCHOR_DONE = 2
    VERTEX_DONE = 3


class StageOrderError(RuntimeError):
    pass


@dataclass(frozen=True)
class JointResidual:
    joint_name: str
    motion_2d: tuple[float, float]


@dataclass
class FitState:
    mesh: TriMesh
    camera: WeakPerspectiveCamera
    stage: Stage = Stage.INITIAL
    snapshots: list = field(default_factory=list)

    def advance(self, mesh: TriMesh, stage: Stage) -> "FitState":
        if stage <= self.stage:
            raise StageOrderError(f"cannot move from {self.stage.name} to {stage.name}")
        return FitState(mesh, self.camera, stage, list(self.snapshots))


def _require_before(state, stage):
    if state.stage >= stage:
        raise StageOrderError(f"{stage.name} requested but state is already {state.stage.name}")


# --------------------------------------------------------------------------
# joints
# --------------------------------------------------------------------------

def joint_residuals(state: FitState, gt_joints_2d, valid, groups) -> list[JointResidual]:
    """Pixel vector from each projected mesh joint to its annotation (valid joints only)."""
    gt = np.asarray(gt_joints_2d, dtype=np.float64)
    pred = project(state.camera, joint_positions(state.mesh, groups))
    out = []
    for g, p, t, ok in zip(groups, pred, gt, valid):
        if ok:
            d = t - p
            if not np.isfinite(d).all():
                raise ValueError(f"non-finite residual for joint '{g.joint_name}'")
            out.append(JointResidual(g.joint_name, (float(d[0]), float(d[1]))))
    return out


def joint_stage(state: FitState, gt_joints_2d, valid, groups, weight: float = 10.0) -> FitState:
    """Translate each annotated joint group by its lifted image-plane residual."""
    _require_before(state, Stage.JOINT_DONE)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("joint stage needs at least one valid joint annotation")
    residuals = {r.joint_name: r for r in joint_residuals(state, gt_joints_2d, valid, groups)}
    idx, targets = [], []
    v = state.mesh.vertices
    for g in groups:
        r = residuals.get(g.joint_name)
        if r is None:
            continue
        lift = np.array([r.motion_2d[0], r.motion_2d[1], 0.0]) / state.camera.scale
        members = np.asarray(g.vertex_indices)
        idx.append(members)
        targets.append(v[members] + lift)
    idx = np.concatenate(idx)
    targets = np.vstack(targets)
    problem = DeformProblem(state.mesh, build_laplacian(state.mesh), idx, targets,
                            np.full(len(idx), float(weight)))
    return state.advance(solve_deform(problem), Stage.JOINT_DONE)


# --------------------------------------------------------------------------
# anchors
# --------------------------------------------------------------------------

def _lookup(mask, pts):
    """Nearest-pixel lookup (pixel containing the point); off-image reads False."""
    h, w = mask.shape
    col = np.floor(pts[..., 0]).astype(np.int64)
    row = np.floor(pts[..., 1]).astype(np.int64)
    inside = (col >= 0) & (col < w) & (row >= 0) & (row < h)
    out = np.zeros(pts.shape[:-1], dtype=bool)
    out[inside] = mask[row[inside], col[inside]]
    return out


def _run_after_skip(skip, hit):
    """Per row: skip the leading ``skip`` samples, then count consecutive ``hit`` samples."""
    n = skip.shape[1]
    first = np.argmin(skip, axis=1)
    first = np.where(skip.all(axis=1), n, first)
    k = np.arange(n)[None, :]
    after = k >= first[:, None]
    # length of the run of hits beginning at `first`
    broken = after & ~hit
    stop = np.where(broken.any(axis=1), np.argmax(broken, axis=1), n)
    return np.maximum(stop - first, 0)


def march_mismatch(mesh_sil, gt_sil, origins, directions, radius_px, step=MARCH_STEP) -> np.ndarray:
    """Signed mismatch length (pixels) along each projected normal.

    Outward (``+direction``): after leaving the mesh silhouette, count the run of
    samples covered by the ground truth only. Inward: after entering the mesh
    silhouette, count the run covered by the mesh only. The longer run wins and
    sets the sign (positive grows the mesh). Samples sit at ``k * step`` for
    ``k * step <= radius_px``.
    """
    mesh_sil = np.asarray(mesh_sil, dtype=bool)
    gt_sil = np.asarray(gt_sil, dtype=bool)
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 2)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 2)
    n_steps = int(np.floor(radius_px / step + 1e-9))
    t = np.arange(n_steps + 1) * step
    out_pts = origins[:, None, :] + t[None, :, None] * directions[:, None, :]
    in_pts = origins[:, None, :] - t[None, :, None] * directions[:, None, :]
    m_out, g_out = _lookup(mesh_sil, out_pts), _lookup(gt_sil, out_pts)
    m_in, g_in = _lookup(mesh_sil, in_pts), _lookup(gt_sil, in_pts)
    grow = _run_after_skip(m_out, g_out & ~m_out) * step
    shrink = _run_after_skip(~m_in, m_in & ~g_in) * step
    return np.where(grow >= shrink, grow, -shrink)


def boundary_distance(mask) -> np.ndarray:
    """Per-pixel distance (px) to the silhouette contour."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.full(mask.shape, np.inf)
    inside = ndimage.distance_transform_edt(mask)
    outside = ndimage.distance_transform_edt(~mask)
    return np.where(mask, inside, outside)


def anchor_oracle(state: FitState, gt_silhouette, anchors, margin_px: float = 20.0,
                  eps_vis: float = EPS_VIS) -> list[AnchorHandle]:
    """Signed movement for each anchor from the silhouette mismatch along its normal."""
    cam = state.camera
    gt = np.asarray(gt_silhouette, dtype=bool)
    if gt.shape != (cam.height, cam.width):
        raise ValueError(f"silhouette shape {gt.shape} does not match camera image size")
    mesh_sil = rasterize(state.mesh, cam, eps_vis).silhouette
    dist = boundary_distance(mesh_sil)
    anchors = list(anchors)
    if not anchors:
        return []
    idx = np.array([a.vertex_index for a in anchors])
    normals = np.array([a.constraint_normal for a in anchors], dtype=np.float64)
    uv = project(cam, state.mesh.vertices[idx])
    dir2 = normals[:, :2]
    dlen = np.linalg.norm(dir2, axis=1)
    col = np.floor(uv[:, 0]).astype(np.int64)
    row = np.floor(uv[:, 1]).astype(np.int64)
    on_image = (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
    near = np.zeros(len(anchors), dtype=bool)
    near[on_image] = dist[row[on_image], col[on_image]] <= margin_px
    usable = on_image & near & (dlen > 1e-6)
    lengths = np.zeros(len(anchors))
    if usable.any():
        unit = dir2[usable] / dlen[usable, None]
        lengths[usable] = march_mismatch(mesh_sil, gt, uv[usable], unit, ANCHOR_RADIUS * cam.scale)
    move = np.clip(lengths / cam.scale, -ANCHOR_RADIUS, ANCHOR_RADIUS)
    out = []
    for a, m, ok in zip(anchors, move, usable):
        active = bool(ok and m != 0.0)
        out.append(AnchorHandle(a.vertex_index, a.constraint_normal, active, float(m) if active else 0.0))
    return out


def anchor_stage(state: FitState, gt_silhouette, anchor_indices, iters: int = 3,
                 margin_px: float = 20.0, weight: float = 1.0, min_gain: float = 1e-3,
                 eps_vis: float = EPS_VIS) -> FitState:
    """Repeat oracle + normal-constrained edit while silhouette IoU keeps improving.

    A step that lowers IoU is discarded and ends the stage, so the returned IoU
    is never below the starting one.
    """
    _require_before(state, Stage.ANCHOR_DONE)
    gt = np.asarray(gt_silhouette, dtype=bool)
    if isinstance(next(iter(anchor_indices), None), AnchorHandle):
        anchor_indices = [a.vertex_index for a in anchor_indices]
    mesh = state.mesh
    iou = silhouette_iou(rasterize(mesh, state.camera, eps_vis).silhouette, gt)
    for it in range(iters):
        cur = replace(state, mesh=mesh)
        anchors = anchor_oracle(cur, gt, anchors_at(mesh, anchor_indices), margin_px, eps_vis)
        n_active = sum(a.active for a in anchors)
        if n_active == 0:
            break
        candidate = deform_along_normals(mesh, anchors, weight)
        new_iou = silhouette_iou(rasterize(candidate, state.camera, eps_vis).silhouette, gt)
        logger.debug("anchor iteration %d: %d active, IoU %.4f -> %.4f", it, n_active, iou, new_iou)
        if new_iou < iou:
            break
        gain = new_iou - iou
        mesh, iou = candidate, new_iou
        if gain <= min_gain:
            break
    return state.advance(mesh, Stage.ANCHOR_DONE)


# --------------------------------------------------------------------------
# vertices
# --------------------------------------------------------------------------

def bilinear_sample(image, uv, valid=None):
    """Bilinear read at continuous pixel coords (pixel centers at ``k + 0.5``).

    Taps outside ``valid`` are dropped and the remaining weights renormalised.
    Returns ``(values, ok)``; ``ok`` is False where no tap was usable.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    valid = np.isfinite(img) if valid is None else np.asarray(valid, dtype=bool) & np.isfinite(img)
    x = uv[:, 0] - 0.5
    y = uv[:, 1] - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    acc = np.zeros(len(uv))
    wsum = np.zeros(len(uv))
    for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                       (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        yy, xx = y0 + dy, x0 + dx
        inside = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        ok = np.zeros(len(uv), dtype=bool)
        ok[inside] = valid[yy[inside], xx[inside]]
        val = np.zeros(len(uv))
        val[ok] = img[yy[ok], xx[ok]]
        wt = np.where(ok, wt, 0.0)
        acc += wt * val
        wsum += wt
    good = wsum > 1e-12
    out = np.zeros(len(uv))
    out[good] = acc[good] / wsum[good]
    return out, good


def vertex_stage(state: FitState, refined_depth, coarse_depth=None, weight: float = 1.0,
                 eps_vis: float = EPS_VIS) -> FitState:
    """Subdivide, then pull visible vertices along the view axis onto the refined depth.

    The target offset for a vertex is the bilinear sample of
    ``refined_depth - coarse_depth`` at its projection, so a refined map equal
    to the coarse one leaves the surface untouched. ``coarse_depth`` defaults
    to the rasterized depth of the subdivided mesh.
    """
    _require_before(state, Stage.VERTEX_DONE)
    cam = state.camera
    refined = np.asarray(refined_depth, dtype=np.float64)
    if refined.shape != (cam.height, cam.width):
        raise ValueError(f"depth map shape {refined.shape} does not match camera image size")
    sub = subdivide_midpoint(state.mesh)
    maps = rasterize(sub, cam, eps_vis)
    coarse = maps.depth if coarse_depth is None else np.asarray(coarse_depth, dtype=np.float64)
    if coarse.shape != refined.shape:
        raise ValueError("coarse and refined depth maps differ in size")
    ok_map = np.isfinite(refined) & np.isfinite(coarse)
    disp = np.zeros_like(refined)
    disp[ok_map] = refined[ok_map] - coarse[ok_map]
    vis = np.flatnonzero(maps.vertex_visibility)
    uv = project(cam, sub.vertices[vis])
    dz, good = bilinear_sample(disp, uv, ok_map)
    idx = vis[good]
    if len(idx) == 0:
        logger.warning("vertex stage: no visible vertex samples the depth map; mesh left subdivided")
        return state.advance(sub, Stage.VERTEX_DONE)
    targets = sub.vertices[idx].copy()
    targets[:, 2] += dz[good]
    problem = DeformProblem(sub, build_laplacian(sub), idx, targets, np.full(len(idx), float(weight)))
    return state.advance(solve_deform(problem), Stage.VERTEX_DONE)


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

@dataclass
class FitInputs:
    """2D evidence for one image. ``joints_2d`` is ``(10, 2)`` in :data:`JOINT_NAMES` order."""

    joints_2d: np.ndarray | None = None
    joint_valid: np.ndarray | None = None
    silhouette: np.ndarray | None = None
    image: np.ndarray | None = None
    albedo: np.ndarray | float | None = None


@dataclass
class FitResult:
    state: FitState
    stage_meshes: dict
    report: dict


def snapshot(state: FitState, inputs: FitInputs, groups, eps_vis=EPS_VIS) -> dict:
    snap = {"stage": state.stage.name.lower()}
    if inputs.silhouette is not None:
        sil = rasterize(state.mesh, state.camera, eps_vis).silhouette
        snap["sil_iou"] = silhouette_iou(sil, inputs.silhouette)
    if inputs.joints_2d is not None and groups is not None:
        valid = inputs.joint_valid if inputs.joint_valid is not None else np.ones(len(groups), bool)
        if np.any(valid):
            # joints are defined on the template topology; a subdivided mesh keeps those indices
            pred = project(state.camera, joint_positions(state.mesh, groups))
            snap["joint_err_px"], _ = joint_error_2d(pred, inputs.joints_2d, valid)
    return snap


def run_pipeline(initial_mesh: TriMesh, camera: WeakPerspectiveCamera, inputs: FitInputs,
                 config: Config | None = None, metadata=None, anchor_indices=None) -> FitResult:
    """Run the enabled stages in order and collect per-stage meshes and metrics."""
    cfg = config or Config()
    eps = cfg["render.eps_vis"]
    groups = metadata.groups if metadata is not None else None
    state = FitState(initial_mesh, camera)
    state.snapshots.append(snapshot(state, inputs, groups, eps))
    meshes = {}
    report = {"stages": {}, "config": cfg.to_dict()}

    def record(name, new_state, **extra):
        nonlocal state
        state = new_state
        state.snapshots.append(snapshot(state, inputs, groups, eps))
        meshes[name] = state.mesh
        report["stages"][name] = {"status": "done", **extra}

    # joint
    if not cfg["stages.joint.enabled"]:
        report["stages"]["joint"] = {"status": "skipped", "reason": "disabled"}
    elif inputs.joints_2d is None or groups is None:
        report["stages"]["joint"] = {"status": "skipped", "reason": "no joint annotation"}
    else:
        valid = inputs.joint_valid if inputs.joint_valid is not None else np.ones(len(groups), bool)
        try:
            record("joint", joint_stage(state, inputs.joints_2d, valid, groups, cfg["joint.weight"]))
        except Exception as exc:
            raise RuntimeError(f"joint stage failed: {exc}") from exc

    # anchor
    if not cfg["stages.anchor.enabled"]:
        report["stages"]["anchor"] = {"status": "skipped", "reason": "disabled"}
    elif inputs.silhouette is None:
        report["stages"]["anchor"] = {"status": "skipped", "reason": "no silhouette"}
    else:
        if anchor_indices is None:
            raise ValueError("anchor stage needs anchor vertex indices")
        try:
            record("anchor", anchor_stage(state, inputs.silhouette, anchor_indices,
                                          cfg["anchor.iters"], cfg["anchor.margin_px"],
                                          cfg["anchor.weight"], eps_vis=eps))
        except Exception as exc:
            raise RuntimeError(f"anchor stage failed: {exc}") from exc

    # shading + vertex
    if not cfg["stages.vertex.enabled"]:
        report["stages"]["vertex"] = {"status": "skipped", "reason": "disabled"}
    else:
        try:
            sub = subdivide_midpoint(state.mesh)
            coarse = rasterize(sub, camera, eps).depth
            refined = coarse
            extra = {}
            if cfg["shading.enabled"] and inputs.image is not None:
                albedo = cfg["shading.albedo"] if inputs.albedo is None else inputs.albedo
                problem = ShadingProblem(inputs.image, coarse, camera.scale, albedo,
                                         cfg["shading.lambda_photo"], cfg["shading.lambda_depth"],
                                         cfg["shading.lambda_smooth"])
                lighting = estimate_lighting(problem)
                res = refine_depth(problem, lighting, cfg["shading.gn_iters"])
                refined = magnify_details(res.depth, coarse, cfg["shading.magnify_factor"])
                extra = {"lighting": lighting.to_dict(), "shading_iterations": res.iterations,
                         "shading_converged": res.converged, "shading_energy": res.energies[-1]}
            else:
                extra = {"shading": "skipped"}
            record("vertex", vertex_stage(state, refined, coarse, cfg["vertex.weight"], eps), **extra)
        except Exception as exc:
            raise RuntimeError(f"vertex stage failed: {exc}") from exc

    report["snapshots"] = state.snapshots
    return FitResult(state, meshes, report)


def joints_array(named: dict) -> tuple[np.ndarray, np.ndarray]:
    """``{name: (u, v, valid)}`` to ``(10, 2)`` points and ``(10,)`` validity in canonical order."""
    pts = np.zeros((len(JOINT_NAMES), 2))
    valid = np.zeros(len(JOINT_NAMES), dtype=bool)
    for i, name in enumerate(JOINT_NAMES):
        u, v, ok = named[name]
        pts[i] = (u, v)
        valid[i] = bool(ok)
    return pts, valid

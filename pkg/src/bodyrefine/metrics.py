"""Accuracy metrics: silhouette IoU, 2D joint error and 3D vertex error."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriMesh
from .render import EPS_VIS, WeakPerspectiveCamera, rasterize

CSV_COLUMNS = ("image", "sil IoU", "2D joint err", "3D err full", "3D err vis")


def silhouette_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def joint_error_2d(pred, gt, valid=None):
    """Mean pixel distance over valid joints.

    Returns ``(mean, per_joint)`` where invalid joints are ``nan`` in ``per_joint``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.ones(len(gt), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("no valid joints to measure")
    per = np.linalg.norm(pred - gt, axis=1)
    per = np.where(valid, per, np.nan)
    return float(np.mean(per[valid])), per


def nearest_distances(query, points) -> np.ndarray:
    """Exact Euclidean distance from each query point to its nearest point."""
    tree = cKDTree(np.asarray(points, dtype=np.float64))
    d, _ = tree.query(np.asarray(query, dtype=np.float64), k=1)
    return d


def error_3d(pred: TriMesh, gt: TriMesh, mode: str = "full",
             camera: WeakPerspectiveCamera | None = None, eps_vis: float = EPS_VIS):
    """Mean distance (mm) from ground-truth vertices to their nearest predicted vertex.

    ``mode="visible"`` keeps only gt vertices visible from ``camera``.
    Returns ``(error_mm, n_vertices_used)``.
    """
    gv = gt.vertices
    if mode == "visible":
        if camera is None:
            raise ValueError("visible mode needs a camera")
        vis = rasterize(gt, camera, eps_vis).vertex_visibility
        if not vis.any():
            raise ValueError("no ground-truth vertex is visible from the camera")
        gv = gv[vis]
    elif mode != "full":
        raise ValueError(f"unknown mode '{mode}'")
    d = nearest_distances(gv, pred.vertices)
    return float(d.mean() * 1000.0), len(gv)


@dataclass
class MetricReport:
    sil_iou: float | None = None
    joint_err_px: float | None = None
    err3d_full_mm: float | None = None
    err3d_vis_mm: float | None = None
    per_joint: dict = field(default_factory=dict)
    n_full: int = 0
    n_vis: int = 0

    def __post_init__(self):
        if self.sil_iou is not None and not 0.0 <= self.sil_iou <= 1.0:
            raise ValueError("sil_iou outside [0, 1]")
        for v in (self.joint_err_px, self.err3d_full_mm, self.err3d_vis_mm):
            if v is not None and not v >= 0:
                raise ValueError("errors must be non-negative")
        if self.n_vis > self.n_full and self.n_full:
            raise ValueError("more visible than total vertices")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    def csv_row(self, image: str) -> dict:
        def fmt(x):
            return "" if x is None else f"{x:.6g}"
        return {"image": image, "sil IoU": fmt(self.sil_iou), "2D joint err": fmt(self.joint_err_px),
                "3D err full": fmt(self.err3d_full_mm), "3D err vis": fmt(self.err3d_vis_mm)}


def evaluate(pred: TriMesh, gt: TriMesh | None = None, camera: WeakPerspectiveCamera | None = None,
             gt_silhouette=None, pred_joints_2d=None, gt_joints_2d=None, joint_valid=None,
             joint_names=None) -> MetricReport:
    rep = MetricReport()
    if gt_silhouette is not None and camera is not None:
        rep.sil_iou = silhouette_iou(rasterize(pred, camera).silhouette, gt_silhouette)
    if pred_joints_2d is not None and gt_joints_2d is not None:
        rep.joint_err_px, per = joint_error_2d(pred_joints_2d, gt_joints_2d, joint_valid)
        names = joint_names or [str(i) for i in range(len(per))]
        rep.per_joint = {n: (None if np.isnan(e) else float(e)) for n, e in zip(names, per)}
    if gt is not None:
        rep.err3d_full_mm, rep.n_full = error_3d(pred, gt, "full")
        if camera is not None:
            rep.err3d_vis_mm, rep.n_vis = error_3d(pred, gt, "visible", camera)
    return rep


def write_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fp:
        w = csv.DictWriter(fp, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)

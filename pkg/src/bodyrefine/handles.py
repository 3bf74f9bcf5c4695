"""Joint handle groups, K-means anchor handles and template metadata."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import TriMesh

JOINT_NAMES = (
    "head", "waist",
    "shoulder_l", "shoulder_r",
    "elbow_l", "elbow_r",
    "knee_l", "knee_r",
    "ankle_l", "ankle_r",
)

ANCHOR_RADIUS = 0.1  # meters, cap on anchor movement


class MetadataError(ValueError):
    pass


@dataclass(frozen=True)
class JointHandleGroup:
    joint_name: str
    vertex_indices: tuple[int, ...]

    def __post_init__(self):
        if self.joint_name not in JOINT_NAMES:
            raise MetadataError(f"unknown joint '{self.joint_name}'")
        if len(self.vertex_indices) == 0:
            raise MetadataError(f"joint '{self.joint_name}' has no vertices")
        object.__setattr__(self, "vertex_indices", tuple(int(i) for i in self.vertex_indices))


@dataclass(frozen=True)
class AnchorHandle:
    """A vertex that may only slide along ``constraint_normal``.

    ``movement`` is a signed distance in meters; inactive anchors carry 0.
    """

    vertex_index: int
    constraint_normal: tuple[float, float, float]
    active: bool = False
    movement: float = 0.0

    def __post_init__(self):
        if not self.active and self.movement != 0.0:
            raise ValueError("inactive anchor must have zero movement")
        if abs(self.movement) > ANCHOR_RADIUS + 1e-12:
            raise ValueError(f"anchor movement {self.movement} exceeds {ANCHOR_RADIUS} m")


@dataclass(frozen=True)
class TemplateMetadata:
    groups: tuple[JointHandleGroup, ...]
    excluded: frozenset[int]
    anchors: tuple[int, ...] | None = None

    def group(self, name) -> JointHandleGroup:
        for g in self.groups:
            if g.joint_name == name:
                return g
        raise KeyError(name)


def joint_positions(mesh: TriMesh, groups) -> np.ndarray:
    """Centroid of each group's vertices, shape ``(len(groups), 3)``."""
    out = np.empty((len(groups), 3))
    for i, g in enumerate(groups):
        idx = np.asarray(g.vertex_indices)
        if len(idx) == 0:
            raise MetadataError(f"joint '{g.joint_name}' has no vertices")
        out[i] = mesh.vertices[idx].mean(axis=0)
    return out


def _kmeans_pp_init(x, k, rng):
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than clusters; pick any unused point
            centers[i] = x[rng.integers(n)]
        else:
            centers[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centers[i]) ** 2, axis=1))
    return centers


def _sq_dists(x, c):
    return np.maximum(
        np.sum(x * x, axis=1)[:, None] - 2.0 * x @ c.T + np.sum(c * c, axis=1)[None, :], 0.0)


def kmeans(x, k, seed=0, tol=1e-7, max_iter=300):
    """Lloyd iterations from a k-means++ start. Returns ``(centers, labels)``."""
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(x, k, rng)
    labels = np.zeros(len(x), dtype=np.int64)
    for _ in range(max_iter):
        labels = np.argmin(_sq_dists(x, centers), axis=1)
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        new = centers.copy()
        nz = counts > 0
        new[nz] = sums[nz] / counts[nz, None]
        # an emptied cluster is re-seeded at the point farthest from its center
        for j in np.flatnonzero(~nz):
            far = np.argmax(np.min(_sq_dists(x, new), axis=1))
            new[j] = x[far]
        shift = np.max(np.linalg.norm(new - centers, axis=1))
        centers = new
        if shift < tol:
            break
    labels = np.argmin(_sq_dists(x, centers), axis=1)
    return centers, labels


def select_anchor_handles(template: TriMesh, excluded=(), k: int = 200, seed: int = 0) -> list[AnchorHandle]:
    """Pick ``k`` evenly spread anchors by K-means over ``[position, normal]``.

    Each cluster contributes the non-excluded vertex nearest its center.
    When two clusters share a nearest vertex the later cluster takes its
    next-nearest unused vertex; distance ties go to the lower index.
    """
    normals = template.normals
    excluded = set(int(i) for i in excluded)
    cand = np.array([i for i in range(template.n_vertices) if i not in excluded], dtype=np.int64)
    if len(cand) < k:
        raise ValueError(f"only {len(cand)} selectable vertices for {k} anchors")
    feats = np.hstack([template.vertices[cand], normals[cand]])
    centers, _ = kmeans(feats, k, seed=seed)
    d = _sq_dists(feats, centers)
    used = set()
    chosen = []
    for j in range(k):
        # stable sort keeps lower candidate (and thus vertex) index first on ties
        for pos in np.argsort(d[:, j], kind="stable"):
            vid = int(cand[pos])
            if vid not in used:
                used.add(vid)
                chosen.append(vid)
                break
    return [AnchorHandle(v, tuple(float(c) for c in normals[v])) for v in chosen]


def anchors_at(mesh: TriMesh, indices) -> list[AnchorHandle]:
    """Anchors on ``indices`` with normals evaluated on ``mesh``."""
    n = mesh.normals
    return [AnchorHandle(int(i), tuple(float(c) for c in n[i])) for i in indices]


def load_template_metadata(path, n_vertices: int | None = None) -> TemplateMetadata:
    with open(path, "r", encoding="utf-8") as fp:
        data = json.load(fp)
    return parse_template_metadata(data, n_vertices)


def parse_template_metadata(data: dict, n_vertices: int | None = None) -> TemplateMetadata:
    if n_vertices is None:
        n_vertices = data.get("n_vertices")
    joints = data.get("joints")
    if not isinstance(joints, dict):
        raise MetadataError("metadata needs a 'joints' mapping")
    missing = [j for j in JOINT_NAMES if j not in joints]
    if missing:
        raise MetadataError(f"missing joint(s): {', '.join(missing)}")
    extra = sorted(set(joints) - set(JOINT_NAMES))
    if extra:
        raise MetadataError(f"unknown joint(s): {', '.join(extra)}")

    def check(idx, what):
        idx = [int(i) for i in idx]
        if any(i < 0 for i in idx) or (n_vertices is not None and any(i >= n_vertices for i in idx)):
            raise MetadataError(f"{what}: vertex index out of range (vertex count {n_vertices})")
        return idx

    groups = []
    owner = {}
    for name in JOINT_NAMES:
        idx = check(joints[name], f"joint '{name}'")
        for i in idx:
            if i in owner:
                raise MetadataError(f"vertex {i} appears in both '{owner[i]}' and '{name}'")
            owner[i] = name
        groups.append(JointHandleGroup(name, tuple(idx)))
    excluded = frozenset(check(data.get("excluded", []), "excluded"))
    anchors = data.get("anchors")
    if anchors is not None:
        anchors = tuple(check(anchors, "anchors"))
        if len(set(anchors)) != len(anchors):
            raise MetadataError("duplicate anchor index")
        if excluded.intersection(anchors):
            raise MetadataError("anchor inside excluded region")
    return TemplateMetadata(tuple(groups), excluded, anchors)


def save_template_metadata(meta: TemplateMetadata, path, n_vertices: int | None = None) -> None:
    data = {}
    if n_vertices is not None:
        data["n_vertices"] = int(n_vertices)
    data["joints"] = {g.joint_name: list(g.vertex_indices) for g in meta.groups}
    data["excluded"] = sorted(meta.excluded)
    if meta.anchors is not None:
        data["anchors"] = list(meta.anchors)
    Path(path).write_text(json.dumps(data) + "\n", encoding="utf-8")


def anchors_to_json(anchors) -> list[dict]:
    return [
        {"vertex": a.vertex_index, "normal": list(a.constraint_normal),
         "active": a.active, "movement": a.movement}
        for a in anchors
    ]

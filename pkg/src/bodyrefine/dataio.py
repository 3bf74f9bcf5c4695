"""Annotation files, mask/depth image IO, view sampling, inner-surface
removal and handle-centred patch export."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .fitting import FitState, anchor_oracle, joint_residuals
from .handles import JOINT_NAMES, anchors_at
from .mesh import TriMesh
from .render import WeakPerspectiveCamera, orthographic_coverage, project, rasterize

logger = logging.getLogger(__name__)

PATCH_SIZES = {"joint": 64, "anchor": 32}
NETWORK_INPUT = 224


class AnnotationError(ValueError):
    pass


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_mask(path, mask) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), mode="L").save(path)


def read_image(path) -> np.ndarray:
    """Image as float in [0, 1]; grayscale stays 2D, colour becomes (H, W, 3)."""
    with Image.open(path) as im:
        if im.mode in ("L", "I", "F", "1"):
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_image(path, image) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def write_pfm(path, depth) -> None:
    """Single-channel little-endian PFM; invalid pixels keep ``-inf``."""
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    with open(path, "wb") as fp:
        fp.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fp.write(np.flipud(d).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fp:
        kind = fp.readline().strip()
        if kind != b"Pf":
            raise ValueError(f"{path}: only single-channel PFM is supported")
        w, h = (int(x) for x in fp.readline().split())
        scale = float(fp.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fp.read(w * h * 4), dtype=dtype)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated PFM data")
    return np.flipud(data.reshape(h, w)).astype(np.float64)


def _image_size(path):
    with Image.open(path) as im:
        return im.size


# --------------------------------------------------------------------------
# annotations
# --------------------------------------------------------------------------

@dataclass
class Annotation:
    """One fitting input. File paths are kept as written and resolved against ``base_dir``."""

    camera: WeakPerspectiveCamera
    joints_2d: dict  # name -> (u, v, valid)
    initial_mesh_path: str | None = None
    image_path: str | None = None
    silhouette_path: str | None = None
    gt_mesh_path: str | None = None
    template_meta_path: str | None = None
    albedo: float | None = None
    base_dir: Path = field(default_factory=Path)
    filtered: bool = False
    filter_reasons: list = field(default_factory=list)

    def resolve(self, rel) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def joints_array(self):
        pts = np.array([self.joints_2d[n][:2] for n in JOINT_NAMES], dtype=np.float64)
        valid = np.array([bool(self.joints_2d[n][2]) for n in JOINT_NAMES])
        return pts, valid

    def to_dict(self) -> dict:
        d = {"camera": self.camera.to_dict(),
             "joints": {n: {"u": float(self.joints_2d[n][0]), "v": float(self.joints_2d[n][1]),
                            "valid": bool(self.joints_2d[n][2])} for n in JOINT_NAMES}}
        for key, val in (("initial_mesh", self.initial_mesh_path), ("image", self.image_path),
                         ("silhouette", self.silhouette_path), ("gt_mesh", self.gt_mesh_path),
                         ("template_meta", self.template_meta_path), ("albedo", self.albedo)):
            if val is not None:
                d[key] = val
        return d


def check_joint_filters(joints_2d: dict, image_size, silhouette=None) -> list[str]:
    """Reasons an annotation fails the dataset filters: every joint must be
    annotated inside the image and, when a silhouette exists, on the body."""
    w, h = image_size
    reasons = []
    for name in JOINT_NAMES:
        u, v, ok = joints_2d[name]
        if not ok or not (0 <= u < w and 0 <= v < h):
            reasons.append(f"joint '{name}' not in image")
        elif silhouette is not None and not silhouette[int(math.floor(v)), int(math.floor(u))]:
            reasons.append(f"joint '{name}' outside silhouette")
    return reasons


def parse_annotation(data: dict, base_dir=".", check_files: bool = True) -> Annotation:
    if not isinstance(data, dict):
        raise AnnotationError("annotation must be a JSON object")
    try:
        camera = WeakPerspectiveCamera.from_dict(data["camera"])
    except KeyError as exc:
        raise AnnotationError(f"camera is missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise AnnotationError(f"bad camera: {exc}") from None
    joints = data.get("joints")
    if not isinstance(joints, dict):
        raise AnnotationError("annotation needs a 'joints' object")
    missing = [n for n in JOINT_NAMES if n not in joints]
    if missing:
        raise AnnotationError(f"missing joint(s): {', '.join(missing)}")
    extra = sorted(set(joints) - set(JOINT_NAMES))
    if extra:
        raise AnnotationError(f"unknown joint(s): {', '.join(extra)}")
    parsed = {}
    for name in JOINT_NAMES:
        j = joints[name]
        try:
            parsed[name] = (float(j["u"]), float(j["v"]), bool(j.get("valid", True)))
        except (KeyError, TypeError, ValueError):
            raise AnnotationError(f"joint '{name}' needs numeric 'u' and 'v'") from None
    albedo = data.get("albedo")
    if albedo is not None:
        albedo = float(albedo)
        if not 0 < albedo <= 1:
            raise AnnotationError("albedo must lie in (0, 1]")
    ann = Annotation(
        camera=camera, joints_2d=parsed,
        initial_mesh_path=data.get("initial_mesh"), image_path=data.get("image"),
        silhouette_path=data.get("silhouette"), gt_mesh_path=data.get("gt_mesh"),
        template_meta_path=data.get("template_meta"), albedo=albedo, base_dir=Path(base_dir),
    )
    silhouette = None
    if check_files:
        for key in ("image_path", "silhouette_path"):
            p = ann.resolve(getattr(ann, key))
            if p is not None and tuple(_image_size(p)) != camera.image_size:
                raise AnnotationError(f"{p} is {_image_size(p)}, camera expects {camera.image_size}")
        if ann.silhouette_path is not None:
            silhouette = read_mask(ann.resolve(ann.silhouette_path))
    ann.filter_reasons = check_joint_filters(parsed, camera.image_size, silhouette)
    ann.filtered = bool(ann.filter_reasons)
    return ann


def load_annotation(path, check_files: bool = True) -> Annotation:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: invalid JSON ({exc})") from None
    return parse_annotation(data, path.parent, check_files)


def save_annotation(ann: Annotation, path) -> None:
    Path(path).write_text(json.dumps(ann.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# view sampling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ViewSchedule:
    azimuths: tuple = tuple(range(0, 341, 20))
    elevations: tuple = (-10, 0, 10)
    sample_count: int = 6
    seed: int = 0

    def candidates(self) -> list[tuple[float, float]]:
        return [(float(a), float(e)) for e in self.elevations for a in self.azimuths]


def sample_views(schedule: ViewSchedule) -> list[tuple[float, float]]:
    """Seeded draw of ``sample_count`` distinct (azimuth, elevation) pairs."""
    cand = schedule.candidates()
    if not 0 <= schedule.sample_count <= len(cand):
        raise ValueError(f"cannot sample {schedule.sample_count} views from {len(cand)} candidates")
    rng = np.random.default_rng(schedule.seed)
    pick = rng.choice(len(cand), size=schedule.sample_count, replace=False)
    return [cand[i] for i in pick]


def rotation_matrix(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    """Rotate by azimuth about the vertical (y) axis, then tilt by elevation about x."""
    a = math.radians(azimuth_deg)
    e = math.radians(elevation_deg)
    ry = np.array([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]])
    rx = np.array([[1, 0, 0], [0, math.cos(e), -math.sin(e)], [0, math.sin(e), math.cos(e)]])
    return rx @ ry


def view_mesh(mesh: TriMesh, azimuth: float, elevation: float) -> TriMesh:
    """Mesh rotated about its bounding-box centre into the requested view."""
    c = 0.5 * (mesh.vertices.min(axis=0) + mesh.vertices.max(axis=0))
    R = rotation_matrix(azimuth, elevation)
    return mesh.with_vertices((mesh.vertices - c) @ R.T + c)


def fit_camera(mesh: TriMesh, image_size=(NETWORK_INPUT, NETWORK_INPUT), fill: float = 0.85) -> WeakPerspectiveCamera:
    """Weak-perspective camera centring the mesh and filling ``fill`` of the image."""
    w, h = image_size
    lo = mesh.vertices[:, :2].min(axis=0)
    hi = mesh.vertices[:, :2].max(axis=0)
    extent = np.maximum(hi - lo, 1e-9)
    scale = fill * min(w / extent[0], h / extent[1])
    center = 0.5 * (lo + hi)
    t = np.array([w / 2.0, h / 2.0]) - scale * center
    return WeakPerspectiveCamera(float(scale), (float(t[0]), float(t[1])), (int(w), int(h)))


# --------------------------------------------------------------------------
# inner-surface removal
# --------------------------------------------------------------------------

def remove_inner_surface(mesh: TriMesh, resolution: int = 512) -> TriMesh:
    """Drop faces that no axis-aligned orthographic view sees, then orphaned vertices."""
    seen = orthographic_coverage(mesh, resolution=resolution)
    if not seen.any():
        raise ValueError("inner-surface removal would delete every face")
    faces = mesh.faces[seen]
    used = np.unique(faces)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(mesh.vertices[used], remap[faces])


# --------------------------------------------------------------------------
# patches
# --------------------------------------------------------------------------

@dataclass
class PatchSet:
    level: str
    names: list
    patches: np.ndarray   # (N, P, P, C): image channels then mesh silhouette
    labels: np.ndarray    # (N, 2) joint motion in px, or (N,) anchor movement in m
    centers: np.ndarray   # (N, 2) integer pixel centres
    off_image: np.ndarray  # (N,) bool

    def save(self, path) -> None:
        np.savez_compressed(path, level=self.level, names=np.array(self.names), patches=self.patches,
                            labels=self.labels, centers=self.centers, off_image=self.off_image)


def crop_patch(image, center_rc, size) -> np.ndarray:
    """``size x size`` window whose pixel ``(size//2, size//2)`` is ``center_rc``; zero padded."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    r0 = int(center_rc[0]) - size // 2
    c0 = int(center_rc[1]) - size // 2
    out = np.zeros((size, size, c), dtype=img.dtype)
    rs, re = max(r0, 0), min(r0 + size, h)
    cs, ce = max(c0, 0), min(c0 + size, w)
    if rs < re and cs < ce:
        out[rs - r0:re - r0, cs - c0:ce - c0] = img[rs:re, cs:ce]
    return out


def _resize_inputs(image, camera, gt_silhouette):
    w, h = camera.image_size
    if (w, h) == (NETWORK_INPUT, NETWORK_INPUT):
        return image, camera, gt_silhouette
    logger.warning("image is %dx%d; rescaling to %dx%d for patch export", w, h, NETWORK_INPUT, NETWORK_INPUT)
    fx, fy = NETWORK_INPUT / w, NETWORK_INPUT / h
    if abs(fx - fy) > 1e-9:
        raise ValueError("patch export rescaling needs a square image")
    img = np.asarray(image, dtype=np.float64)
    pil = Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))
    img = np.asarray(pil.resize((NETWORK_INPUT, NETWORK_INPUT), Image.BILINEAR), dtype=np.float64) / 255.0
    cam = WeakPerspectiveCamera(camera.scale * fx, (camera.translation[0] * fx, camera.translation[1] * fy),
                                (NETWORK_INPUT, NETWORK_INPUT))
    sil = None
    if gt_silhouette is not None:
        m = Image.fromarray(np.asarray(gt_silhouette, dtype=np.uint8) * 255)
        sil = np.asarray(m.resize((NETWORK_INPUT, NETWORK_INPUT), Image.NEAREST)) > 127
    return img, cam, sil


def export_patches(image, mesh: TriMesh, camera: WeakPerspectiveCamera, level: str, *,
                   groups=None, gt_joints_2d=None, joint_valid=None,
                   anchor_indices=None, gt_silhouette=None, margin_px: float = 20.0) -> PatchSet:
    """Crop one patch per handle around its projection and pair it with its motion label.

    Joint level: 64x64 patches labelled with the 2D residual (``nan`` when the
    annotation is invalid). Anchor level: 32x32 patches labelled with the
    signed movement along the normal.
    """
    if level not in PATCH_SIZES:
        raise ValueError(f"level must be one of {sorted(PATCH_SIZES)}")
    orig_w = camera.width
    image, camera, gt_silhouette = _resize_inputs(image, camera, gt_silhouette)
    size = PATCH_SIZES[level]
    sil = rasterize(mesh, camera).silhouette.astype(np.float64)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    stack = np.concatenate([img, sil[..., None]], axis=-1)
    state = FitState(mesh, camera)

    if level == "joint":
        if groups is None or gt_joints_2d is None:
            raise ValueError("joint patches need joint groups and annotations")
        from .handles import joint_positions

        pts = project(camera, joint_positions(mesh, groups))
        names = [g.joint_name for g in groups]
        valid = np.ones(len(groups), bool) if joint_valid is None else np.asarray(joint_valid, bool)
        gt = np.asarray(gt_joints_2d, dtype=np.float64) * (NETWORK_INPUT / orig_w)
        labels = np.full((len(groups), 2), np.nan)
        res = {r.joint_name: r.motion_2d for r in joint_residuals(state, gt, valid, groups)}
        for i, n in enumerate(names):
            if n in res:
                labels[i] = res[n]
    else:
        if anchor_indices is None or gt_silhouette is None:
            raise ValueError("anchor patches need anchor indices and a ground-truth silhouette")
        anchors = anchor_oracle(state, gt_silhouette, anchors_at(mesh, anchor_indices), margin_px)
        pts = project(camera, mesh.vertices[np.asarray(anchor_indices)])
        names = [f"anchor_{a.vertex_index}" for a in anchors]
        labels = np.array([a.movement for a in anchors])

    h, w = camera.height, camera.width
    centers = np.floor(pts[:, ::-1]).astype(np.int64)  # (row, col)
    off = ~((centers[:, 0] >= 0) & (centers[:, 0] < h) & (centers[:, 1] >= 0) & (centers[:, 1] < w))
    patches = np.zeros((len(pts), size, size, stack.shape[-1]))
    for i, c in enumerate(centers):
        if not off[i]:
            patches[i] = crop_patch(stack, c, size)
    return PatchSet(level, names, patches, labels, centers, off)

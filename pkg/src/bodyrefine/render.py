"""Weak-perspective camera and a vectorised z-buffer rasterizer.

Image conventions: pixel ``(row, col)`` covers ``[col, col+1) x [row, row+1)``
in ``(u, v)`` and is sampled at its center. The camera looks down ``-z``, so a
larger ``z`` is closer to the viewer. Coverage follows the top-left fill rule,
which makes masks reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TriMesh

EPS_VIS = 0.01  # meters; visibility tolerance against the z-buffer

# cap on (triangle, pixel) candidate pairs held in memory at once
_CHUNK_PAIRS = 4_000_000


@dataclass(frozen=True)
class WeakPerspectiveCamera:
    """``(u, v) = scale * (x, y) + translation``; depth is the model ``z``."""

    scale: float
    translation: tuple[float, float]
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("camera scale must be positive")
        w, h = self.image_size
        if int(w) <= 0 or int(h) <= 0:
            raise ValueError("image_size components must be positive")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "translation", (float(self.translation[0]), float(self.translation[1])))
        object.__setattr__(self, "image_size", (int(w), int(h)))

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def to_dict(self) -> dict:
        return {"scale": self.scale, "translation": list(self.translation),
                "image_size": list(self.image_size)}

    @classmethod
    def from_dict(cls, d) -> "WeakPerspectiveCamera":
        return cls(d["scale"], tuple(d["translation"]), tuple(d["image_size"]))


def project(camera: WeakPerspectiveCamera, points) -> np.ndarray:
    """Project one point ``(3,)`` or many ``(N, 3)`` to pixel coordinates."""
    p = np.asarray(points, dtype=np.float64)
    return camera.scale * p[..., :2] + np.asarray(camera.translation)


def unproject(camera: WeakPerspectiveCamera, uv, z) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    xy = (uv - np.asarray(camera.translation)) / camera.scale
    z = np.broadcast_to(np.asarray(z, dtype=np.float64), xy.shape[:-1])
    return np.concatenate([xy, z[..., None]], axis=-1)


@dataclass(frozen=True, eq=False)
class RasterMaps:
    silhouette: np.ndarray        # (H, W) bool
    depth: np.ndarray             # (H, W) float, -inf where not covered
    face_index: np.ndarray        # (H, W) int, -1 where not covered
    vertex_visibility: np.ndarray  # (V,) bool

    @property
    def depth_valid(self) -> np.ndarray:
        return self.silhouette


def rasterize_triangles(uv, z, faces, width, height):
    """Z-buffer fill of screen-space triangles.

    Returns ``(face_index, zbuffer)`` maps of shape ``(height, width)``.
    Ties on depth go to the lower face index.
    """
    uv = np.asarray(uv, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    zbuf = np.full(height * width, -np.inf)
    fbuf = np.full(height * width, -1, dtype=np.int64)

    a, b, c = uv[faces[:, 0]], uv[faces[:, 1]], uv[faces[:, 2]]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    # standardise winding so the interior has all edge functions >= 0
    flip = area2 < 0
    b2 = np.where(flip[:, None], c, b)
    c2 = np.where(flip[:, None], b, c)
    za, zb, zc = z[faces[:, 0]], z[faces[:, 1]], z[faces[:, 2]]
    zb2 = np.where(flip, zc, zb)
    zc2 = np.where(flip, zb, zc)
    area2 = np.abs(area2)

    lo = np.minimum(np.minimum(a, b2), c2)
    hi = np.maximum(np.maximum(a, b2), c2)
    # pixel centers k + 0.5 within [lo, hi]
    c0 = np.maximum(np.ceil(lo[:, 0] - 0.5), 0)
    c1 = np.minimum(np.floor(hi[:, 0] - 0.5), width - 1)
    r0 = np.maximum(np.ceil(lo[:, 1] - 0.5), 0)
    r1 = np.minimum(np.floor(hi[:, 1] - 0.5), height - 1)
    finite = np.isfinite(lo).all(axis=1) & np.isfinite(hi).all(axis=1)
    ok = (area2 > 0) & finite & (c1 >= c0) & (r1 >= r0)
    tri = np.flatnonzero(ok)
    if len(tri) == 0:
        return fbuf.reshape(height, width), zbuf.reshape(height, width)
    c0, r0 = c0[tri].astype(np.int64), r0[tri].astype(np.int64)
    nw = c1[tri].astype(np.int64) - c0 + 1
    nh = r1[tri].astype(np.int64) - r0 + 1
    counts = nw * nh

    start = 0
    while start < len(tri):
        cum = np.cumsum(counts[start:])
        stop = start + max(1, int(np.searchsorted(cum, _CHUNK_PAIRS, side="right")))
        sel = slice(start, stop)
        t_ids = tri[sel]
        cnt = counts[sel]
        owner = np.repeat(np.arange(len(t_ids)), cnt)
        offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        col = c0[sel][owner] + offs % nw[sel][owner]
        row = r0[sel][owner] + offs // nw[sel][owner]
        t = t_ids[owner]
        px = col + 0.5
        py = row + 0.5

        inside = np.ones(len(t), dtype=bool)
        weights = []
        # edge opposite to vertex: (b,c)->a, (c,a)->b, (a,b)->c
        for p, q in ((b2, c2), (c2, a), (a, b2)):
            pt, qt = p[t], q[t]
            dx = qt[:, 0] - pt[:, 0]
            dy = qt[:, 1] - pt[:, 1]
            w = dx * (py - pt[:, 1]) - dy * (px - pt[:, 0])
            top_left = ((dy == 0) & (dx > 0)) | (dy < 0)
            inside &= (w > 0) | ((w == 0) & top_left)
            weights.append(w)
        t = t[inside]
        if len(t):
            wa, wb, wc = (w[inside] for w in weights)
            depth = (wa * za[t] + wb * zb2[t] + wc * zc2[t]) / area2[t]
            pix = row[inside] * width + col[inside]
            # per-pixel winner inside the chunk: max depth, then lowest face id
            order = np.lexsort((t, -depth, pix))
            pix_s = pix[order]
            first = np.ones(len(order), dtype=bool)
            first[1:] = pix_s[1:] != pix_s[:-1]
            win = order[first]
            wp, wz, wf = pix[win], depth[win], t[win]
            cur_z, cur_f = zbuf[wp], fbuf[wp]
            better = (wz > cur_z) | ((wz == cur_z) & ((cur_f < 0) | (wf < cur_f)))
            zbuf[wp[better]] = wz[better]
            fbuf[wp[better]] = wf[better]
        start = stop
    return fbuf.reshape(height, width), zbuf.reshape(height, width)


def vertex_visibility(uv, z, zbuf, eps=EPS_VIS) -> np.ndarray:
    h, w = zbuf.shape
    col = np.floor(uv[:, 0]).astype(np.int64)
    row = np.floor(uv[:, 1]).astype(np.int64)
    inb = (col >= 0) & (col < w) & (row >= 0) & (row < h) & np.isfinite(uv).all(axis=1)
    vis = np.zeros(len(uv), dtype=bool)
    zz = zbuf[row[inb], col[inb]]
    vis[inb] = np.isfinite(zz) & (z[inb] >= zz - eps)
    return vis


def rasterize(mesh: TriMesh, camera: WeakPerspectiveCamera, eps_vis: float = EPS_VIS) -> RasterMaps:
    """Render silhouette, depth and per-vertex visibility of ``mesh``."""
    uv = project(camera, mesh.vertices)
    z = mesh.vertices[:, 2]
    fbuf, zbuf = rasterize_triangles(uv, z, mesh.faces, camera.width, camera.height)
    sil = fbuf >= 0
    vis = vertex_visibility(uv, z, zbuf, eps_vis)
    return RasterMaps(sil, zbuf, fbuf, vis)


AXIS_DIRECTIONS = np.array([
    [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1],
], dtype=np.float64)


def _view_basis(d):
    d = np.asarray(d, dtype=np.float64)
    d = d / np.linalg.norm(d)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    a = np.cross(helper, d)
    a /= np.linalg.norm(a)
    b = np.cross(d, a)
    return a, b, d


def orthographic_coverage(mesh: TriMesh, directions=AXIS_DIRECTIONS, resolution: int = 512) -> np.ndarray:
    """Per-face flag: does the face win the z-buffer for at least one pixel
    in at least one orthographic render looking back along ``directions``?"""
    v = mesh.vertices
    center = 0.5 * (v.min(axis=0) + v.max(axis=0))
    half = 0.5 * float(np.max(v.max(axis=0) - v.min(axis=0)))
    # the bounding sphere fits every direction's image
    radius = max(np.sqrt(3.0) * half, 1e-12) * 1.01
    scale = resolution / (2.0 * radius)
    seen = np.zeros(mesh.n_faces, dtype=bool)
    p = v - center
    for d in directions:
        a, b, dn = _view_basis(d)
        uv = np.stack([p @ a, p @ b], axis=1) * scale + resolution / 2.0
        fbuf, _ = rasterize_triangles(uv, p @ dn, mesh.faces, resolution, resolution)
        hit = fbuf[fbuf >= 0]
        seen[hit] = True
    return seen

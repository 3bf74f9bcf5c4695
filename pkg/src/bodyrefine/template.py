"""Procedural stand-in for the SMPL body template.

The real SMPL mesh is licensed and not shipped. :func:`body_proxy` builds a
closed genus-0 surface of revolution with the same vertex and face counts
(6,890 / 13,776, hence 20,664 edges), a 1.7 m tall upright A-pose silhouette,
and the same handle metadata layout: ten joint rings, an excluded region for
face, hands and toes, and 200 K-means anchors. Any SMPL-topology OBJ plus a
matching metadata JSON can be used in its place.
"""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy.interpolate import PchipInterpolator

from .handles import (
    JointHandleGroup, TemplateMetadata, parse_template_metadata, select_anchor_handles,
)
from .mesh import TriMesh

N_RINGS = 82
N_SEGMENTS = 84
BODY_HEIGHT = 1.7

# (height fraction from the top, half-width along x, half-depth along z), meters
_PROFILE = np.array([
    [0.000, 0.000, 0.000],
    [0.004, 0.030, 0.032],
    [0.012, 0.055, 0.060],
    [0.030, 0.082, 0.090],
    [0.060, 0.095, 0.102],
    [0.095, 0.085, 0.094],
    [0.120, 0.060, 0.066],
    [0.140, 0.055, 0.060],
    [0.165, 0.150, 0.095],
    [0.190, 0.220, 0.110],
    [0.300, 0.235, 0.120],
    [0.420, 0.215, 0.110],
    [0.520, 0.225, 0.120],
    [0.580, 0.175, 0.110],
    [0.750, 0.140, 0.090],
    [0.940, 0.110, 0.075],
    [0.975, 0.100, 0.095],
    [0.992, 0.060, 0.060],
    [1.000, 0.000, 0.000],
])

# joint -> (height fraction, arc center in degrees or None for the full ring, arc half-width)
_JOINT_RINGS = {
    "head": (0.060, None, 0),
    "waist": (0.450, None, 0),
    "shoulder_l": (0.190, 0.0, 50.0),
    "shoulder_r": (0.190, 180.0, 50.0),
    "elbow_l": (0.360, 0.0, 40.0),
    "elbow_r": (0.360, 180.0, 40.0),
    "knee_l": (0.750, 0.0, 50.0),
    "knee_r": (0.750, 180.0, 50.0),
    "ankle_l": (0.950, 0.0, 50.0),
    "ankle_r": (0.950, 180.0, 50.0),
}


def _ring_heights():
    return np.arange(1, N_RINGS + 1) / (N_RINGS + 1)


def _ring_vertex(ring, seg):
    return 1 + ring * N_SEGMENTS + seg


def body_proxy() -> TriMesh:
    """The 6,890-vertex body proxy in T-pose-like rest position, y up, +x = body left."""
    h = _ring_heights()
    rx = PchipInterpolator(_PROFILE[:, 0], _PROFILE[:, 1])(h)
    rz = PchipInterpolator(_PROFILE[:, 0], _PROFILE[:, 2])(h)
    y = BODY_HEIGHT * (0.5 - h)
    phi = 2.0 * np.pi * np.arange(N_SEGMENTS) / N_SEGMENTS
    ring_pts = np.stack([
        rx[:, None] * np.cos(phi)[None, :],
        np.broadcast_to(y[:, None], (N_RINGS, N_SEGMENTS)),
        rz[:, None] * np.sin(phi)[None, :],
    ], axis=-1).reshape(-1, 3)
    top = np.array([[0.0, BODY_HEIGHT / 2, 0.0]])
    bottom = np.array([[0.0, -BODY_HEIGHT / 2, 0.0]])
    verts = np.vstack([top, ring_pts, bottom])
    south = len(verts) - 1

    faces = []
    s = np.arange(N_SEGMENTS)
    s1 = (s + 1) % N_SEGMENTS
    # winding chosen so cross products point outward (checked in tests)
    faces.append(np.stack([np.zeros(N_SEGMENTS, int), _ring_vertex(0, s1), _ring_vertex(0, s)], axis=1))
    for r in range(N_RINGS - 1):
        a, b = _ring_vertex(r, s), _ring_vertex(r, s1)
        c, d = _ring_vertex(r + 1, s), _ring_vertex(r + 1, s1)
        faces.append(np.stack([a, b, d], axis=1))
        faces.append(np.stack([a, d, c], axis=1))
    last = N_RINGS - 1
    faces.append(np.stack([np.full(N_SEGMENTS, south), _ring_vertex(last, s), _ring_vertex(last, s1)], axis=1))
    return TriMesh(verts, np.vstack(faces))


def _nearest_ring(frac):
    return int(np.argmin(np.abs(_ring_heights() - frac)))


def _joint_groups():
    groups = []
    deg = 360.0 * np.arange(N_SEGMENTS) / N_SEGMENTS
    for name, (frac, center, half) in _JOINT_RINGS.items():
        ring = _nearest_ring(frac)
        if center is None:
            segs = np.arange(0, N_SEGMENTS, 4)
        else:
            diff = (deg - center + 180.0) % 360.0 - 180.0
            segs = np.flatnonzero(np.abs(diff) <= half)
        groups.append(JointHandleGroup(name, tuple(int(_ring_vertex(ring, s)) for s in segs)))
    return tuple(groups)


def _excluded(mesh: TriMesh):
    v = mesh.vertices
    h = 0.5 - v[:, 1] / BODY_HEIGHT
    face = (h > 0.015) & (h < 0.125) & (v[:, 2] > 0.03)
    # hands hang beside the hips at the widest part of the profile
    rx = PchipInterpolator(_PROFILE[:, 0], _PROFILE[:, 1])(np.clip(h, 0, 1))
    hands = (h > 0.49) & (h < 0.56) & (np.abs(v[:, 0]) > 0.85 * rx)
    toes = (h > 0.955) & (v[:, 2] > 0.0)
    return frozenset(int(i) for i in np.flatnonzero(face | hands | toes))


def build_proxy_metadata(mesh: TriMesh | None = None, k: int = 200, seed: int = 0) -> TemplateMetadata:
    mesh = body_proxy() if mesh is None else mesh
    excluded = _excluded(mesh)
    anchors = select_anchor_handles(mesh, excluded, k=k, seed=seed)
    return TemplateMetadata(_joint_groups(), excluded, tuple(a.vertex_index for a in anchors))


@lru_cache(maxsize=1)
def proxy_metadata() -> TemplateMetadata:
    """Shipped metadata for :func:`body_proxy` (regenerate with :func:`build_proxy_metadata`)."""
    text = resources.files("bodyrefine").joinpath("data/body_proxy_meta.json").read_text(encoding="utf-8")
    return parse_template_metadata(json.loads(text))

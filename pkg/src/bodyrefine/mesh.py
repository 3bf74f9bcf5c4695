"""Triangle mesh container, OBJ/PLY IO, normals, midpoint subdivision and
the uniform graph Laplacian."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be parsed.

    ``line`` is the 1-based line number of the offending record when known.
    """

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class IsolatedVertexError(ValueError):
    pass


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle mesh.

    Parameters
    ----------
    vertices : (V, 3) float array, meters.
    faces : (F, 3) int array, counter-clockwise seen from outside.
    vertex_normals : (V, 3) float array or None. Filled by
        :func:`compute_vertex_normals`; use :attr:`normals` to get them lazily.
    """

    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray | None = None

    def __post_init__(self):
        v = _frozen(self.vertices, np.float64)
        f = _frozen(self.faces, np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) == 0:
            raise ValueError("vertices must be a non-empty (V, 3) array")
        if f.ndim != 2 or f.shape[1] != 3 or len(f) == 0:
            raise ValueError("faces must be a non-empty (F, 3) array")
        if f.min() < 0 or f.max() >= len(v):
            raise ValueError(f"face index out of range for {len(v)} vertices")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("degenerate face with repeated vertex index")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.vertex_normals is not None:
            n = _frozen(self.vertex_normals, np.float64)
            if n.shape != v.shape:
                raise ValueError("vertex_normals shape must match vertices")
            object.__setattr__(self, "vertex_normals", n)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def normals(self) -> np.ndarray:
        if self.vertex_normals is None:
            # the one permitted cache fill
            object.__setattr__(self, "vertex_normals", _vertex_normals(self.vertices, self.faces))
        return self.vertex_normals

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(vertices, self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted (E, 2) array."""
        return unique_edges(self.faces)

    def face_normals(self) -> np.ndarray:
        """Unit face normals; degenerate faces get a zero vector."""
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, length, out=np.zeros_like(n), where=length > 0)


def unique_edges(faces) -> np.ndarray:
    faces = np.asarray(faces)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def _vertex_normals(vertices, faces):
    # cross product magnitude is twice the face area, giving area weighting for free
    fn = np.cross(vertices[faces[:, 1]] - vertices[faces[:, 0]],
                  vertices[faces[:, 2]] - vertices[faces[:, 0]])
    acc = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(acc, faces[:, k], fn)
    length = np.linalg.norm(acc, axis=1)
    out = np.zeros_like(acc)
    ok = length > 0
    out[ok] = acc[ok] / length[ok, None]
    out[~ok] = (0.0, 0.0, 1.0)
    return out


def compute_vertex_normals(mesh: TriMesh) -> TriMesh:
    """Return a copy of ``mesh`` with area-weighted unit vertex normals.

    Vertices with no (non-degenerate) incident face get ``(0, 0, 1)``.
    """
    return TriMesh(mesh.vertices, mesh.faces, _vertex_normals(mesh.vertices, mesh.faces))


def subdivide_midpoint(mesh: TriMesh) -> TriMesh:
    """Split every face into four through its edge midpoints.

    Original vertices keep their index and position; the midpoint of edge
    ``k`` (in :func:`unique_edges` order) gets index ``V + k``.
    """
    v = mesh.vertices
    f = mesh.faces
    nv = len(v)
    edges = unique_edges(f)
    mid = 0.5 * (v[edges[:, 0]] + v[edges[:, 1]])

    # lookup via a sorted key array
    keys = edges[:, 0] * nv + edges[:, 1]

    def edge_id(a, b):
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        return np.searchsorted(keys, lo * nv + hi) + nv

    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    ab, bc, ca = edge_id(a, b), edge_id(b, c), edge_id(c, a)
    new_faces = np.concatenate([
        np.stack([a, ab, ca], axis=1),
        np.stack([ab, b, bc], axis=1),
        np.stack([ca, bc, c], axis=1),
        np.stack([ab, bc, ca], axis=1),
    ])
    return TriMesh(np.vstack([v, mid]), new_faces)


@dataclass(frozen=True, eq=False)
class LaplacianOperator:
    """Uniform graph Laplacian with delta coordinates ``L @ V``.

    Convention: ``delta_i = mean(neighbors of i) - v_i``, i.e. off-diagonal
    weights ``1/deg(i)`` and a diagonal of ``-1``.
    """

    matrix: sparse.csr_matrix
    degree: np.ndarray

    def apply(self, positions) -> np.ndarray:
        return self.matrix @ np.asarray(positions, dtype=np.float64)

    def neighbor_mean(self, positions) -> np.ndarray:
        positions = np.asarray(positions, dtype=np.float64)
        return self.apply(positions) + positions


def adjacency(mesh: TriMesh) -> sparse.csr_matrix:
    e = mesh.edges()
    n = mesh.n_vertices
    i = np.concatenate([e[:, 0], e[:, 1]])
    j = np.concatenate([e[:, 1], e[:, 0]])
    return sparse.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))


def build_laplacian(mesh: TriMesh) -> LaplacianOperator:
    adj = adjacency(mesh)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    isolated = np.flatnonzero(deg == 0)
    if len(isolated):
        raise IsolatedVertexError(
            f"{len(isolated)} isolated vertices (first: {isolated[0]}); cannot form delta coordinates")
    L = sparse.diags(1.0 / deg) @ adj - sparse.identity(mesh.n_vertices)
    L = sparse.csr_matrix(L)
    L.sort_indices()
    return LaplacianOperator(L, deg.astype(np.int64))


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Unit icosahedron refined by midpoint subdivision and projected to the sphere."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    m = TriMesh(v / np.linalg.norm(v, axis=1, keepdims=True), f)
    for _ in range(subdivisions):
        m = subdivide_midpoint(m)
        m = m.with_vertices(m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True))
    return m.with_vertices(m.vertices * radius + np.asarray(center, dtype=np.float64))


# --------------------------------------------------------------------------
# IO
# --------------------------------------------------------------------------

def load_mesh(path) -> TriMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return _load_obj(path)
    if suffix == ".ply":
        return _load_ply(path)
    raise MeshFormatError(f"unsupported mesh format '{suffix}'", path)


def save_mesh(mesh: TriMesh, path, binary: bool = True) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        _save_obj(mesh, path)
    elif suffix == ".ply":
        _save_ply(mesh, path, binary=binary)
    else:
        raise MeshFormatError(f"unsupported mesh format '{suffix}'", path)


def _fan(indices):
    return [(indices[0], indices[i], indices[i + 1]) for i in range(1, len(indices) - 1)]


def _load_obj(path):
    verts = []
    faces = []
    face_lines = []
    with open(path, "r", encoding="utf-8", errors="replace") as fp:
        for lineno, raw in enumerate(fp, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise MeshFormatError("bad vertex record", path, lineno) from None
                if len(verts[-1]) != 3:
                    raise MeshFormatError("vertex needs 3 coordinates", path, lineno)
            elif tag == "f":
                idx = []
                for tok in parts[1:]:
                    try:
                        k = int(tok.split("/")[0])
                    except ValueError:
                        raise MeshFormatError(f"bad face index '{tok}'", path, lineno) from None
                    if k < 0:
                        k = len(verts) + k + 1
                    idx.append(k - 1)
                if len(idx) < 3:
                    raise MeshFormatError("face needs at least 3 vertices", path, lineno)
                for tri in _fan(idx):
                    faces.append(tri)
                    face_lines.append(lineno)
            # vn, vt, o, g, s, usemtl, mtllib are ignored
    return _finish(path, verts, faces, face_lines)


def _finish(path, verts, faces, face_lines):
    if not verts:
        raise MeshFormatError("mesh has no vertices", path)
    if not faces:
        raise MeshFormatError("mesh has no faces", path)
    f = np.asarray(faces, dtype=np.int64)
    nv = len(verts)
    bad = np.flatnonzero((f < 0).any(axis=1) | (f >= nv).any(axis=1))
    if len(bad):
        line = face_lines[bad[0]] if face_lines else None
        raise MeshFormatError(f"face index out of range (vertex count {nv})", path, line)
    degenerate = np.flatnonzero((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2]))
    if len(degenerate):
        line = face_lines[degenerate[0]] if face_lines else None
        raise MeshFormatError("degenerate face with repeated vertex index", path, line)
    return TriMesh(np.asarray(verts, dtype=np.float64), f)


def _save_obj(mesh, path):
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _load_ply(path):
    data = path.read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshFormatError("not a PLY file", path, 1)
    nl = data.find(b"\n", end)
    header_lines = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[nl + 1:]
    header_len = len(header_lines) + 1

    fmt = None
    elements = []  # (name, count, [(prop_name, type, list_count_type or None)])
    for lineno, line in enumerate(header_lines, start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError("property before element", path, lineno)
            if parts[1] == "list":
                elements[-1][2].append((parts[4], parts[3], parts[2]))
            else:
                elements[-1][2].append((parts[2], parts[1], None))
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise MeshFormatError(f"unsupported PLY format {fmt}", path, 2)

    verts = []
    faces = []
    face_lines = []
    if fmt == "ascii":
        tokens_by_line = body.decode("ascii", errors="replace").splitlines()
        row = 0
        for name, count, props in elements:
            for _ in range(count):
                if row >= len(tokens_by_line):
                    raise MeshFormatError("unexpected end of file", path, header_len + row + 1)
                toks = tokens_by_line[row].split()
                lineno = header_len + row + 1
                row += 1
                rec = {}
                pos = 0
                try:
                    for pname, ptype, ltype in props:
                        if ltype is None:
                            rec[pname] = float(toks[pos])
                            pos += 1
                        else:
                            n = int(toks[pos])
                            rec[pname] = [int(t) for t in toks[pos + 1:pos + 1 + n]]
                            pos += 1 + n
                except (ValueError, IndexError):
                    raise MeshFormatError(f"bad {name} record", path, lineno) from None
                _ply_record(name, rec, verts, faces, face_lines, lineno)
    else:
        endian = "<" if fmt == "binary_little_endian" else ">"
        off = 0
        for name, count, props in elements:
            for _ in range(count):
                rec = {}
                try:
                    for pname, ptype, ltype in props:
                        if ltype is None:
                            code = _PLY_TYPES[ptype]
                            (rec[pname],) = struct.unpack_from(endian + code, body, off)
                            off += struct.calcsize(code)
                        else:
                            lcode = _PLY_TYPES[ltype]
                            (n,) = struct.unpack_from(endian + lcode, body, off)
                            off += struct.calcsize(lcode)
                            code = _PLY_TYPES[ptype]
                            rec[pname] = list(struct.unpack_from(endian + code * n, body, off))
                            off += struct.calcsize(code) * n
                except (struct.error, KeyError):
                    raise MeshFormatError(f"truncated or malformed binary {name} data", path) from None
                _ply_record(name, rec, verts, faces, face_lines, None)
    return _finish(path, verts, faces, face_lines)


def _ply_record(name, rec, verts, faces, face_lines, lineno):
    if name == "vertex":
        verts.append([rec["x"], rec["y"], rec["z"]])
    elif name == "face":
        idx = rec.get("vertex_indices", rec.get("vertex_index"))
        if idx is None:
            return
        for tri in _fan([int(i) for i in idx]):
            faces.append(tri)
            face_lines.append(lineno)


def _save_ply(mesh, path, binary=True):
    nv, nf = mesh.n_vertices, mesh.n_faces
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {nv}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {nf}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    if binary:
        vbytes = mesh.vertices.astype("<f8").tobytes()
        frec = np.zeros(nf, dtype=[("n", "u1"), ("idx", "<i4", 3)])
        frec["n"] = 3
        frec["idx"] = mesh.faces
        path.write_bytes(header.encode("ascii") + vbytes + frec.tobytes())
    else:
        lines = [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
        lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces.tolist()]
        path.write_text(header + "\n".join(lines) + "\n", encoding="ascii")

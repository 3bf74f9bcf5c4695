"""Soft-constraint Laplacian mesh editing.

The deformed positions ``V'`` minimise::

    ||L V' - delta||^2 + sum_c w_c^2 ||V'_c - target_c||^2

with ``delta = L V`` taken from the mesh being edited. Each coordinate axis is
an independent linear least-squares problem sharing one system matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse import linalg as spla

from .mesh import LaplacianOperator, TriMesh, build_laplacian

logger = logging.getLogger(__name__)


class NoConstraintsError(ValueError):
    pass


class SingularSystemError(RuntimeError):
    """A connected component carries no constraint, leaving it free to translate."""

    def __init__(self, component, size, example_vertex):
        super().__init__(
            f"component {component} ({size} vertices, e.g. vertex {example_vertex}) has no handle constraint")
        self.component = component
        self.size = size
        self.example_vertex = example_vertex


@dataclass(frozen=True)
class HandleConstraint:
    vertex_index: int
    target: tuple[float, float, float]
    weight: float

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError("constraint weight must be positive")
        if self.vertex_index < 0:
            raise ValueError("constraint vertex index must be non-negative")


@dataclass(frozen=True, eq=False)
class DeformProblem:
    """Constraints are stored column-wise: ``indices (C,)``, ``targets (C, 3)``, ``weights (C,)``."""

    mesh: TriMesh
    laplacian: LaplacianOperator
    indices: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    solver_tolerance: float = 1e-9

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        tgt = np.asarray(self.targets, dtype=np.float64).reshape(-1, 3)
        w = np.broadcast_to(np.asarray(self.weights, dtype=np.float64), idx.shape).copy()
        if len(idx) == 0:
            raise NoConstraintsError("deformation needs at least one handle constraint")
        if len(tgt) != len(idx):
            raise ValueError("targets and indices differ in length")
        if idx.min() < 0 or idx.max() >= self.mesh.n_vertices:
            raise ValueError("constraint vertex index out of range")
        if not np.all(w > 0):
            raise ValueError("constraint weights must be positive")
        if not np.isfinite(tgt).all():
            raise ValueError("constraint targets must be finite")
        for name, arr in (("indices", idx), ("targets", tgt), ("weights", w)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_constraints(cls, mesh, constraints, laplacian=None, solver_tolerance=1e-9):
        constraints = list(constraints)
        lap = build_laplacian(mesh) if laplacian is None else laplacian
        if not constraints:
            raise NoConstraintsError("deformation needs at least one handle constraint")
        return cls(
            mesh, lap,
            np.array([c.vertex_index for c in constraints], dtype=np.int64),
            np.array([c.target for c in constraints], dtype=np.float64),
            np.array([c.weight for c in constraints], dtype=np.float64),
            solver_tolerance,
        )

    @property
    def constraints(self) -> list[HandleConstraint]:
        return [HandleConstraint(int(i), tuple(t), float(w))
                for i, t, w in zip(self.indices, self.targets.tolist(), self.weights)]

    def system(self):
        """Normal equations ``(A, B)`` with ``A V' = B`` for all three axes."""
        L = self.laplacian.matrix
        n = self.mesh.n_vertices
        delta = L @ self.mesh.vertices
        w2 = self.weights ** 2
        C = sparse.csr_matrix((w2, (self.indices, self.indices)), shape=(n, n))
        A = (L.T @ L + C).tocsc()
        A.sum_duplicates()
        A.sort_indices()
        B = L.T @ delta
        np.add.at(B, self.indices, w2[:, None] * self.targets)
        return A, B


def deform_energy(problem: DeformProblem, vertices) -> float:
    v = np.asarray(vertices, dtype=np.float64)
    L = problem.laplacian.matrix
    r_lap = L @ v - L @ problem.mesh.vertices
    r_con = problem.weights[:, None] * (v[problem.indices] - problem.targets)
    return float(np.sum(r_lap ** 2) + np.sum(r_con ** 2))


def _check_components(problem):
    # connectivity of the operator actually being solved, which may differ from the face graph
    graph = abs(problem.laplacian.matrix) > 0
    n_comp, labels = csgraph.connected_components(graph, directed=False)
    if n_comp == 1:
        return
    covered = np.zeros(n_comp, dtype=bool)
    covered[labels[problem.indices]] = True
    for comp in np.flatnonzero(~covered):
        members = np.flatnonzero(labels == comp)
        raise SingularSystemError(int(comp), len(members), int(members[0]))


def _jacobi_cg(A, B, rtol):
    diag = A.diagonal()
    M = sparse.diags(1.0 / diag)
    out = np.empty_like(B)
    for k in range(B.shape[1]):
        x, info = spla.cg(A, B[:, k], rtol=rtol, atol=0.0, M=M, maxiter=20 * A.shape[0])
        if info != 0:
            raise RuntimeError(f"conjugate gradient did not converge on axis {k} (info={info})")
        out[:, k] = x
    return out


def _relative_residual(A, X, B):
    denom = max(np.linalg.norm(B), 1e-300)
    return float(np.linalg.norm(A @ X - B) / denom)


def solve_deform(problem: DeformProblem) -> TriMesh:
    _check_components(problem)
    A, B = problem.system()
    try:
        X = spla.splu(A, permc_spec="MMD_AT_PLUS_A").solve(B)
        res = _relative_residual(A, X, B)
    except RuntimeError as exc:
        logger.warning("sparse factorisation failed (%s); using CG", exc)
        res = np.inf
    if not res <= problem.solver_tolerance:
        logger.info("direct residual %.3g above tolerance; refining with CG", res)
        X = _jacobi_cg(A, B, rtol=1e-10)
        res = _relative_residual(A, X, B)
        if not res <= max(problem.solver_tolerance, 1e-10):
            raise RuntimeError(f"deformation solve residual {res:.3g} above tolerance")
    return TriMesh(X, problem.mesh.faces)


def dump_system(problem: DeformProblem, path) -> None:
    """Write the system matrix in Matrix Market text format (debugging aid)."""
    from scipy.io import mmwrite

    A, _ = problem.system()
    mmwrite(str(path), A, comment="normal equations of the Laplacian edit")


def deform_along_normals(mesh: TriMesh, anchors, weight: float = 1.0, laplacian=None) -> TriMesh:
    """Move each active anchor by ``movement`` along its constraint normal.

    Inactive anchors are ordinary free vertices. With no active anchor the
    input mesh is returned unchanged.
    """
    active = [a for a in anchors if a.active]
    if not active:
        return mesh
    idx = np.array([a.vertex_index for a in active], dtype=np.int64)
    normals = np.array([a.constraint_normal for a in active], dtype=np.float64)
    move = np.array([a.movement for a in active], dtype=np.float64)
    if not np.isfinite(move).all():
        raise ValueError("active anchor with non-finite movement")
    targets = mesh.vertices[idx] + move[:, None] * normals
    lap = build_laplacian(mesh) if laplacian is None else laplacian
    return solve_deform(DeformProblem(mesh, lap, idx, targets, np.full(len(idx), float(weight))))

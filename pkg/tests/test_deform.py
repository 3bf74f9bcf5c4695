import numpy as np
import pytest
from scipy import sparse

from bodyrefine.deform import (
    DeformProblem, HandleConstraint, NoConstraintsError, SingularSystemError, deform_along_normals,
    deform_energy, dump_system, solve_deform,
)
from bodyrefine.handles import AnchorHandle, anchors_at
from bodyrefine.mesh import LaplacianOperator, TriMesh, build_laplacian, icosphere

from builders import line_strip, merge


def dense_oracle(vertices, L, idx, targets, weights):
    """Stacked least squares solved densely: rows [L; W C] against [L V; W T]."""
    L = np.asarray(L.todense()) if sparse.issparse(L) else np.asarray(L)
    n = len(vertices)
    C = np.zeros((len(idx), n))
    C[np.arange(len(idx)), idx] = 1.0
    A = np.vstack([L, weights[:, None] * C])
    b = np.vstack([L @ vertices, weights[:, None] * targets])
    return np.linalg.lstsq(A, b, rcond=None)[0]


def problem_on(mesh, idx, targets, weights):
    return DeformProblem(mesh, build_laplacian(mesh), np.asarray(idx), np.asarray(targets, float),
                         np.asarray(weights, float))


@pytest.fixture(scope="module")
def sphere():
    return icosphere(2, radius=0.5)


# ---------------------------------------------------------------- core solver

def test_identity_fixed_point(sphere):
    idx = np.arange(sphere.n_vertices)
    out = solve_deform(problem_on(sphere, idx, sphere.vertices, np.ones(len(idx))))
    assert np.abs(out.vertices - sphere.vertices).max() < 1e-7


@pytest.mark.parametrize("n_handles", [1, 5, 40])
def test_translation_mode(sphere, n_handles):
    rng = np.random.default_rng(n_handles)
    idx = rng.choice(sphere.n_vertices, n_handles, replace=False)
    t = np.array([0.3, -1.2, 0.05])
    out = solve_deform(problem_on(sphere, idx, sphere.vertices[idx] + t, rng.uniform(0.5, 20, n_handles)))
    assert np.abs(out.vertices - (sphere.vertices + t)).max() < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_dense_oracle_equivalence(seed):
    m = icosphere(1, radius=0.8)  # 42 vertices
    rng = np.random.default_rng(seed)
    m = m.with_vertices(m.vertices + rng.normal(0, 0.05, m.vertices.shape))
    k = rng.integers(1, 12)
    idx = rng.choice(m.n_vertices, k, replace=False)
    tgt = m.vertices[idx] + rng.normal(0, 0.2, (k, 3))
    w = rng.uniform(0.1, 50, k)
    ours = solve_deform(problem_on(m, idx, tgt, w)).vertices
    ref = dense_oracle(m.vertices, build_laplacian(m).matrix, idx, tgt, w)
    assert np.abs(ours - ref).max() < 1e-8


def path_laplacian(n):
    rows, cols, vals = [], [], []
    for i in range(n):
        nb = [j for j in (i - 1, i + 1) if 0 <= j < n]
        rows += [i] + [i] * len(nb)
        cols += [i] + nb
        vals += [-1.0] + [1.0 / len(nb)] * len(nb)
    L = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return LaplacianOperator(L, np.array([1] + [2] * (n - 2) + [1]))


def test_line_strip_matches_dense_oracle():
    pos, _ = line_strip(10)
    # carrier triangles for the output mesh; the path-graph operator defines the energy
    carrier = TriMesh(pos, np.array([(i, i + 1, i + 2) for i in range(8)]))
    lap = path_laplacian(10)
    idx = np.array([0, 9])
    tgt = np.array([[0.0, 0, 0], [18.0, 0, 0]])  # stretched to twice the length
    w = np.array([1000.0, 1000.0])
    ours = solve_deform(DeformProblem(carrier, lap, idx, tgt, w)).vertices
    ref = dense_oracle(pos, lap.matrix, idx, tgt, w)
    assert np.abs(ours - ref).max() < 1e-8
    assert np.abs(ours[[0, 9]] - tgt).max() < 1e-3
    x = ours[:, 0]
    assert np.all(np.diff(x) > 0)  # order preserved
    assert np.allclose(x + x[::-1], 18.0)  # symmetric about the midpoint
    # endpoint rows of the uniform operator keep the end segments near their rest length,
    # so the interior is not the uniform interpolation
    assert np.abs(x - np.linspace(0, 18, 10)).max() > 0.5


def test_weight_monotonicity(sphere):
    rng = np.random.default_rng(11)
    idx = rng.choice(sphere.n_vertices, 6, replace=False)
    tgt = sphere.vertices[idx] + rng.normal(0, 0.3, (6, 3))
    residuals = []
    for w0 in (1.0, 10.0, 100.0):
        w = np.ones(6)
        w[0] = w0
        out = solve_deform(problem_on(sphere, idx, tgt, w))
        residuals.append(np.linalg.norm(out.vertices[idx[0]] - tgt[0]))
    assert residuals[0] >= residuals[1] >= residuals[2]


def test_permutation_invariance(sphere):
    rng = np.random.default_rng(5)
    idx = rng.choice(sphere.n_vertices, 15, replace=False)
    tgt = sphere.vertices[idx] + rng.normal(0, 0.1, (15, 3))
    w = rng.uniform(1, 10, 15)
    perm = rng.permutation(15)
    a = solve_deform(problem_on(sphere, idx, tgt, w)).vertices
    b = solve_deform(problem_on(sphere, idx[perm], tgt[perm], w[perm])).vertices
    assert np.abs(a - b).max() < 1e-10


def test_energy_optimality(sphere):
    rng = np.random.default_rng(2)
    idx = rng.choice(sphere.n_vertices, 8, replace=False)
    prob = problem_on(sphere, idx, sphere.vertices[idx] + rng.normal(0, 0.2, (8, 3)), rng.uniform(1, 5, 8))
    v = solve_deform(prob).vertices
    e0 = deform_energy(prob, v)
    for _ in range(100):
        p = v.copy()
        p[rng.integers(len(v)), rng.integers(3)] += rng.choice([-1e-3, 1e-3])
        assert deform_energy(prob, p) >= e0


def test_linearity(sphere):
    rng = np.random.default_rng(9)
    idx = rng.choice(sphere.n_vertices, 10, replace=False)
    w = rng.uniform(1, 10, 10)
    t1 = sphere.vertices[idx] + rng.normal(0, 0.2, (10, 3))
    t2 = sphere.vertices[idx] + rng.normal(0, 0.2, (10, 3))
    a = solve_deform(problem_on(sphere, idx, t1, w)).vertices
    b = solve_deform(problem_on(sphere, idx, t2, w)).vertices
    c = solve_deform(problem_on(sphere, idx, 0.5 * (t1 + t2), w)).vertices
    assert np.abs(0.5 * (a + b) - c).max() < 1e-8


def test_from_constraints_matches_arrays(sphere):
    cons = [HandleConstraint(3, (0.1, 0.2, 0.3), 2.0), HandleConstraint(7, (0.0, 0.0, 0.6), 5.0)]
    p1 = DeformProblem.from_constraints(sphere, cons)
    p2 = problem_on(sphere, [3, 7], [c.target for c in cons], [2.0, 5.0])
    assert np.array_equal(solve_deform(p1).vertices, solve_deform(p2).vertices)
    assert p1.constraints == cons


def test_no_constraints_is_an_error(sphere):
    with pytest.raises(NoConstraintsError):
        DeformProblem.from_constraints(sphere, [])


def test_unconstrained_component_reported():
    two = merge(icosphere(0), icosphere(0, center=(5, 0, 0)))
    with pytest.raises(SingularSystemError) as err:
        solve_deform(problem_on(two, [0], [[0, 0, 1.0]], [1.0]))
    assert err.value.size == 12 and err.value.example_vertex == 12


def test_bad_weight_rejected(sphere):
    with pytest.raises(ValueError):
        problem_on(sphere, [0], [[0, 0, 0]], [0.0])


def test_dump_system(tmp_path, sphere):
    dump_system(problem_on(sphere, [0], [sphere.vertices[0]], [1.0]), tmp_path / "a.mtx")
    assert (tmp_path / "a.mtx").read_text().startswith("%%MatrixMarket")


# ---------------------------------------------------------------- normal-constrained edits

def test_all_inactive_anchors_return_input(sphere):
    anchors = anchors_at(sphere, range(10))
    assert deform_along_normals(sphere, anchors) is sphere


def test_zero_movement_anchor_is_null_edit(sphere):
    a = AnchorHandle(4, tuple(sphere.normals[4]), active=True, movement=0.0)
    out = deform_along_normals(sphere, [a])
    assert np.abs(out.vertices - sphere.vertices).max() < 1e-9


def test_outward_anchor_push_matches_dense_oracle():
    small = icosphere(1, radius=1.0)  # 42 vertices, 80 faces
    anchors = [AnchorHandle(i, tuple(small.normals[i]), True, 0.1) for i in range(small.n_vertices)]
    out = deform_along_normals(small, anchors)
    idx = np.array([a.vertex_index for a in anchors])
    tgt = small.vertices[idx] + 0.1 * small.normals[idx]
    ref = dense_oracle(small.vertices, build_laplacian(small).matrix, idx, tgt, np.ones(len(idx)))
    assert np.abs(out.vertices - ref).max() < 1e-8
    grow = np.linalg.norm(out.vertices[idx], axis=1) - 1.0
    # soft weight 1 against the rest-shape delta coordinates leaves the growth a few percent short
    assert np.all(np.abs(grow - 0.1) < 0.005)

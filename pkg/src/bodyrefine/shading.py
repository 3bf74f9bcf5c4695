"""Spherical-harmonics shading: lighting estimation, photometric depth
refinement and detail magnification.

Depth maps are indexed ``[row, col]`` with ``u = col`` and ``v = row``; values
are model ``z`` in meters (larger is closer). Normals live in the model frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

logger = logging.getLogger(__name__)

# Orthonormal real SH constants for bands 0-2. Ordered as
# (1, y, z, x, xy, yz, 3z^2-1, xz, x^2-y^2).
SH_C0 = 0.5 / np.sqrt(np.pi)                 # 0.282095
SH_C1 = np.sqrt(3.0 / (4.0 * np.pi))         # 0.488603
SH_C2 = 0.5 * np.sqrt(15.0 / np.pi)          # 1.092548
SH_C3 = 0.25 * np.sqrt(5.0 / np.pi)          # 0.315392
SH_C4 = 0.25 * np.sqrt(15.0 / np.pi)         # 0.546274

DEFAULT_ALBEDO = 0.6


def sh_basis(normals, check=True) -> np.ndarray:
    """Second-order SH basis, shape ``(..., 9)``. Input normals must be unit length."""
    n = np.asarray(normals, dtype=np.float64)
    if check:
        length = np.linalg.norm(n, axis=-1)
        if not np.all(np.abs(length - 1.0) <= 1e-6):
            raise ValueError("sh_basis needs unit normals")
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([
        np.full_like(x, SH_C0),
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ], axis=-1)


def sh_basis_jacobian(normals) -> np.ndarray:
    """``d H_k / d n``, shape ``(..., 9, 3)``."""
    n = np.asarray(normals, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    rows = [
        (zero, zero, zero),
        (zero, SH_C1 * one, zero),
        (zero, zero, SH_C1 * one),
        (SH_C1 * one, zero, zero),
        (SH_C2 * y, SH_C2 * x, zero),
        (zero, SH_C2 * z, SH_C2 * y),
        (zero, zero, 6.0 * SH_C3 * z),
        (SH_C2 * z, zero, SH_C2 * x),
        (2.0 * SH_C4 * x, -2.0 * SH_C4 * y, zero),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def rgb_to_gray(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., :3] @ np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SHLighting:
    coefficients: np.ndarray  # (9,)
    residual: float = 0.0     # RMS fit residual
    rank_deficient: bool = False

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=np.float64).reshape(9)
        if not np.isfinite(c).all():
            raise ValueError("lighting coefficients must be finite")
        object.__setattr__(self, "coefficients", c)

    def to_dict(self) -> dict:
        return {"coefficients": [float(c) for c in self.coefficients],
                "residual": float(self.residual), "rank_deficient": bool(self.rank_deficient)}


@dataclass(frozen=True, eq=False)
class ShadingProblem:
    """Observed intensities ``image`` on the pixels where ``coarse_depth`` is finite."""

    image: np.ndarray
    coarse_depth: np.ndarray
    scale: float
    albedo: np.ndarray | float = DEFAULT_ALBEDO
    lambda_photo: float = 1.0
    lambda_depth: float = 2.0
    lambda_smooth: float = 4.0
    mask: np.ndarray | None = None

    def __post_init__(self):
        img = rgb_to_gray(self.image)
        depth = np.asarray(self.coarse_depth, dtype=np.float64)
        if img.shape != depth.shape:
            raise ValueError(f"image {img.shape} and depth {depth.shape} differ in size")
        mask = np.isfinite(depth) if self.mask is None else np.asarray(self.mask, dtype=bool)
        if mask.shape != depth.shape:
            raise ValueError("mask and depth differ in size")
        mask = mask & np.isfinite(depth)
        if not mask.any():
            raise ValueError("empty depth mask")
        albedo = np.broadcast_to(np.asarray(self.albedo, dtype=np.float64), depth.shape).copy()
        if albedo.shape != depth.shape:
            raise ValueError("albedo and depth differ in size")
        if min(self.lambda_photo, self.lambda_depth, self.lambda_smooth) < 0:
            raise ValueError("energy weights must be non-negative")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "coarse_depth", depth)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "albedo", albedo)


def stencil_valid(mask) -> np.ndarray:
    """Pixels whose four neighbours are all inside ``mask``."""
    m = np.asarray(mask, dtype=bool)
    v = m.copy()
    v[0, :] = v[-1, :] = v[:, 0] = v[:, -1] = False
    v[1:-1, 1:-1] &= m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return v


def _one_axis_gradient(d, m, axis):
    fwd = np.roll(d, -1, axis=axis)
    bwd = np.roll(d, 1, axis=axis)
    mf = np.roll(m, -1, axis=axis)
    mb = np.roll(m, 1, axis=axis)
    # roll wraps around; the wrapped row/column is never a real neighbour
    edge_f = [slice(None)] * 2
    edge_b = [slice(None)] * 2
    edge_f[axis] = -1
    edge_b[axis] = 0
    mf[tuple(edge_f)] = False
    mb[tuple(edge_b)] = False
    with np.errstate(invalid="ignore"):
        g = np.where(mf & mb, 0.5 * (fwd - bwd),
                     np.where(mf, fwd - d, np.where(mb, d - bwd, 0.0)))
    return np.where(m, g, 0.0)


def depth_to_normals(depth, scale: float, mask=None):
    """Unit normals of a depth map.

    Central differences inside the mask, one-sided at its border. Returns
    ``(normals (H, W, 3), valid (H, W))`` where ``valid`` marks pixels with a
    full central stencil; normals outside ``mask`` are zero.
    """
    d = np.asarray(depth, dtype=np.float64)
    m = np.isfinite(d) if mask is None else (np.asarray(mask, dtype=bool) & np.isfinite(d))
    dz = np.where(m, d, 0.0)
    gu = _one_axis_gradient(dz, m, axis=1)
    gv = _one_axis_gradient(dz, m, axis=0)
    nrm = np.stack([-scale * gu, -scale * gv, np.ones_like(gu)], axis=-1)
    nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
    nrm[~m] = 0.0
    return nrm, stencil_valid(m)


def shading_image(depth, scale, lighting, albedo=DEFAULT_ALBEDO, mask=None):
    """Render ``albedo * sum_k l_k H_k(n)`` from a depth map (0 off-mask)."""
    coeffs = lighting.coefficients if isinstance(lighting, SHLighting) else np.asarray(lighting, dtype=np.float64)
    n, _ = depth_to_normals(depth, scale, mask)
    m = np.isfinite(depth) if mask is None else np.asarray(mask, dtype=bool)
    out = np.asarray(albedo, dtype=np.float64) * (sh_basis(n, check=False) @ coeffs)
    return np.where(m, out, 0.0)


def estimate_lighting(problem: ShadingProblem) -> SHLighting:
    """Least-squares SH coefficients from the coarse-depth normals."""
    n, valid = depth_to_normals(problem.coarse_depth, problem.scale, problem.mask)
    if np.count_nonzero(valid) < 9:
        raise ValueError("need at least 9 pixels with a full normal stencil")
    A = problem.albedo[valid][:, None] * sh_basis(n[valid])
    b = problem.image[valid]
    coeffs, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    r = A @ coeffs - b
    return SHLighting(coeffs, float(np.sqrt(np.mean(r ** 2))), bool(rank < 9))


def photometric_loss(depth, problem: ShadingProblem, lighting: SHLighting):
    """RMS of ``albedo * shading(n(depth)) - I`` over full-stencil pixels.

    Returns ``(rms, residual_map)`` with ``nan`` outside the stencil-valid set.
    """
    n, valid = depth_to_normals(depth, problem.scale, problem.mask)
    res = np.full(problem.image.shape, np.nan)
    pred = problem.albedo[valid] * (sh_basis(n[valid]) @ lighting.coefficients)
    res[valid] = pred - problem.image[valid]
    if not valid.any():
        return 0.0, res
    return float(np.sqrt(np.mean(res[valid] ** 2))), res


class _Energy:
    """Residual stack and Jacobian of the refinement energy over mask pixels.

    The smoothness term acts on the detail layer ``d - d_coarse`` so that an
    already consistent coarse depth is a stationary point.
    """

    def __init__(self, problem: ShadingProblem, lighting: SHLighting):
        self.p = problem
        self.l = lighting.coefficients
        mask = problem.mask
        h, w = mask.shape
        self.pix = np.flatnonzero(mask.ravel())
        self.n = len(self.pix)
        index = np.full(h * w, -1, dtype=np.int64)
        index[self.pix] = np.arange(self.n)
        self.index = index.reshape(h, w)
        self.valid = stencil_valid(mask)
        vr, vc = np.nonzero(self.valid)
        self.vr, self.vc = vr, vc
        self.i_c = self.index[vr, vc]
        self.i_r = self.index[vr, vc + 1]
        self.i_l = self.index[vr, vc - 1]
        self.i_d = self.index[vr + 1, vc]
        self.i_u = self.index[vr - 1, vc]
        self.rho = problem.albedo[vr, vc]
        self.obs = problem.image[vr, vc]
        self.x0 = problem.coarse_depth.ravel()[self.pix]
        self.G = self._graph_laplacian(mask)
        self.sp = np.sqrt(problem.lambda_photo)
        self.sd = np.sqrt(problem.lambda_depth)
        self.ss = np.sqrt(problem.lambda_smooth)

    def _graph_laplacian(self, mask):
        rows, cols, vals = [], [], []
        r, c = np.nonzero(mask)
        me = self.index[r, c]
        deg = np.zeros(self.n)
        h, w = mask.shape
        for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            rr, cc = r + dr, c + dc
            inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            ok = np.zeros_like(inside)
            ok[inside] = mask[rr[inside], cc[inside]]
            rows.append(me[ok])
            cols.append(self.index[rr[ok], cc[ok]])
            vals.append(np.ones(np.count_nonzero(ok)))
            deg += np.bincount(me[ok], minlength=self.n)
        rows.append(np.arange(self.n))
        cols.append(np.arange(self.n))
        vals.append(-deg)
        return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                 shape=(self.n, self.n))

    def _normals(self, x):
        s = self.p.scale
        gu = 0.5 * (x[self.i_r] - x[self.i_l])
        gv = 0.5 * (x[self.i_d] - x[self.i_u])
        m = np.stack([-s * gu, -s * gv, np.ones_like(gu)], axis=1)
        norm = np.linalg.norm(m, axis=1)
        return m / norm[:, None], norm

    def photo_residual(self, x):
        n, _ = self._normals(x)
        return self.rho * (sh_basis(n, check=False) @ self.l) - self.obs

    def residuals(self, x):
        return np.concatenate([
            self.sp * self.photo_residual(x),
            self.sd * (x - self.x0),
            self.ss * (self.G @ (x - self.x0)),
        ])

    def energy(self, x) -> float:
        return float(np.sum(self.residuals(x) ** 2))

    def jacobian(self, x):
        s = self.p.scale
        n, norm = self._normals(x)
        # dr/dn = rho * l^T dH/dn, then project onto the tangent plane of n
        dr_dn = self.rho[:, None] * np.einsum("k,pkj->pj", self.l, sh_basis_jacobian(n))
        tang = dr_dn - np.sum(dr_dn * n, axis=1, keepdims=True) * n
        q = tang / norm[:, None]
        du = -s * q[:, 0] * 0.5
        dv = -s * q[:, 1] * 0.5
        m = len(self.i_c)
        rows = np.repeat(np.arange(m), 4)
        cols = np.stack([self.i_r, self.i_l, self.i_d, self.i_u], axis=1).ravel()
        vals = np.stack([du, -du, dv, -dv], axis=1).ravel()
        Jp = sparse.csr_matrix((vals * self.sp, (rows, cols)), shape=(m, self.n))
        eye = sparse.identity(self.n, format="csr") * self.sd
        return sparse.vstack([Jp, eye, self.G * self.ss]).tocsr()

    def gradient(self, x):
        return 2.0 * (self.jacobian(x).T @ self.residuals(x))

    def to_map(self, x):
        out = np.full(self.p.mask.shape, -np.inf)
        out.ravel()[self.pix] = x
        return out


@dataclass
class RefineResult:
    depth: np.ndarray
    energies: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def shading_energy(depth, problem: ShadingProblem, lighting: SHLighting) -> float:
    e = _Energy(problem, lighting)
    return e.energy(np.asarray(depth, dtype=np.float64).ravel()[e.pix])


def shading_energy_gradient(depth, problem: ShadingProblem, lighting: SHLighting) -> np.ndarray:
    """Analytic gradient of the refinement energy as a depth-sized map (0 off-mask)."""
    e = _Energy(problem, lighting)
    g = e.gradient(np.asarray(depth, dtype=np.float64).ravel()[e.pix])
    out = np.zeros(problem.mask.shape)
    out.ravel()[e.pix] = g
    return out


def refine_depth(problem: ShadingProblem, lighting: SHLighting, iterations: int = 10,
                 max_halvings: int = 8, rtol: float = 1e-9) -> RefineResult:
    """Damped Gauss-Newton on the photometric + fidelity + smoothness energy."""
    e = _Energy(problem, lighting)
    x = e.x0.copy()
    energy = e.energy(x)
    trace = [energy]
    converged = False
    it = 0
    for it in range(1, iterations + 1):
        r = e.residuals(x)
        J = e.jacobian(x)
        JtJ = (J.T @ J).tocsc()
        g = J.T @ r
        if np.linalg.norm(g) <= 1e-14 * max(1.0, energy):
            converged = True
            it -= 1
            break
        step = spla.spsolve(JtJ, -g)
        alpha = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            cand = x + alpha * step
            ce = e.energy(cand)
            if np.isfinite(ce) and ce < energy:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            converged = True
            break
        decrease = energy - ce
        x, energy = cand, ce
        trace.append(energy)
        if decrease <= rtol * max(trace[0], 1e-300):
            converged = True
            break
    if not converged:
        logger.warning("shading refinement stopped after %d iterations without converging", it)
    return RefineResult(e.to_map(x), trace, it, converged)


def magnify_details(refined, coarse, factor: float = 10.0) -> np.ndarray:
    """``coarse + factor * (refined - coarse)`` where both maps are finite."""
    refined = np.asarray(refined, dtype=np.float64)
    coarse = np.asarray(coarse, dtype=np.float64)
    ok = np.isfinite(refined) & np.isfinite(coarse)
    out = coarse.copy()
    if factor == 1.0:
        out[ok] = refined[ok]
    else:
        out[ok] = coarse[ok] + factor * (refined[ok] - coarse[ok])
    return out

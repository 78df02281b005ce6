"""Scale-controlled ARAP deformation of the cage and its adjoint.

Each element targets the rotated and scaled rest shape R_e S_e (N V_e)^T.
The regularized least-squares problem decouples per coordinate, so one
n_vert x n_vert matrix (A^T A + gamma I) is factorized once and reused for
every forward solve and every adjoint solve.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .cage import CENTERING, CageMesh

logger = logging.getLogger(__name__)


class DeformationError(RuntimeError):
    pass


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrices for (w, x, y, z) quaternions assumed unit length."""
    w, x, y, z = np.moveaxis(np.asarray(q, float), -1, 0)
    R = np.empty(np.shape(w) + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_matrix_jacobian(q) -> np.ndarray:
    """dR/dq of the polynomial map above, shape (..., 4, 3, 3)."""
    w, x, y, z = np.moveaxis(np.asarray(q, float), -1, 0)
    zero = np.zeros_like(w)
    J = np.stack([
        [[zero, -z, y], [z, zero, -x], [-y, x, zero]],
        [[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
        [[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]],
        [[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]],
    ])
    return 2 * np.moveaxis(J, (0, 1, 2), (-3, -2, -1))


def axis_angle_quat(axis, angle) -> np.ndarray:
    a = np.asarray(axis, float)
    a = a / np.linalg.norm(a)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * a])


@dataclass(eq=False)
class DeformationSystem:
    cage: CageMesh
    gamma: float
    A: sp.csr_matrix
    M: sp.csc_matrix
    lu: object

    @property
    def size(self) -> int:
        """Unfolded system size (three coordinates per vertex)."""
        return 3 * self.cage.n_vertices

    def solve(self, rhs) -> np.ndarray:
        return self.lu.solve(np.asarray(rhs, float))


def assemble_system(cage: CageMesh, gamma: float = 1e-2) -> DeformationSystem:
    """Factorize A^T A + gamma I for the rest cage; A stacks N over each element's vertices."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    n_el = cage.n_elements
    rows = (4 * np.arange(n_el)[:, None, None] + np.arange(4)[None, :, None]).repeat(4, axis=2)
    cols = np.broadcast_to(cage.tets[:, None, :], (n_el, 4, 4))
    vals = np.broadcast_to(CENTERING, (n_el, 4, 4))
    A = sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(4 * n_el, cage.n_vertices))
    M = (A.T @ A + gamma * sp.identity(cage.n_vertices)).tocsc()
    try:
        lu = splu(M, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise DeformationError(f"factorization failed: {exc}") from exc
    return DeformationSystem(cage, float(gamma), A, M, lu)


@dataclass(eq=False)
class DeformationState:
    q: np.ndarray
    s: np.ndarray
    R: np.ndarray
    targets: np.ndarray  # (n_el, 3, 4) = R S (N V)^T
    xi: np.ndarray  # deformed vertex positions (n_vert, 3)
    grad_g: np.ndarray  # per-element gradient of G
    lpd: np.ndarray  # unit LPDs
    degenerate: np.ndarray  # elements with vanishing |grad G|
    residual: float

    @property
    def g_values(self) -> np.ndarray:
        return self.xi[:, 2]


def lpd_threshold(cage: CageMesh) -> float:
    lo, hi = cage.bbox
    return 1e-8 * (hi[2] - lo[2]) / cage.mean_edge


def element_gradients(cage: CageMesh, values) -> np.ndarray:
    """Constant gradient of a piecewise-linear vertex field per element."""
    return np.einsum("eij,ei->ej", cage.shape_gradients, np.asarray(values)[cage.tets])


def deform(system: DeformationSystem, q, s) -> DeformationState:
    """Solve for the deformed cage given per-element unit quaternions and scales."""
    cage = system.cage
    q = np.asarray(q, float)
    s = np.asarray(s, float)
    if q.shape != (cage.n_elements, 4) or s.shape != (cage.n_elements, 3):
        raise ValueError("need one (q, s) pair per element")
    R = quat_to_matrix(q)
    targets = np.einsum("eij,ej,ejk->eik", R, s, cage.centered)
    if not np.isfinite(targets).all():
        raise DeformationError("non-finite entries in the target shapes")
    b = np.transpose(targets, (0, 2, 1)).reshape(-1, 3)
    rhs = system.A.T @ b + system.gamma * cage.vertices
    xi = system.solve(rhs)
    res = np.linalg.norm(system.M @ xi - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if res > 1e-8:
        raise DeformationError(f"normal-equation residual {res:.2e} exceeds 1e-8")
    gg = element_gradients(cage, xi[:, 2])
    norm = np.linalg.norm(gg, axis=1)
    degenerate = norm < lpd_threshold(cage)
    lpd = gg / np.where(degenerate, 1.0, norm)[:, None]
    lpd[degenerate] = 0.0
    return DeformationState(q, s, R, targets, xi, gg, lpd, degenerate, float(res))


def scalar_field_value(xi, cage: CageMesh, x):
    """G at points: z of the barycentric image in the deformed cage; NaN outside the cage."""
    x = np.asarray(x, float)
    e, a = cage.locate(np.atleast_2d(x))
    g = np.einsum("ni,ni->n", a, np.asarray(xi)[cage.tets[np.maximum(e, 0)], 2])
    g[e < 0] = np.nan
    return float(g[0]) if x.ndim == 1 else g


def element_lpd(state: DeformationState, e: int):
    """Unit LPD of one element, or None if degenerate."""
    return None if state.degenerate[e] else state.lpd[e]


def lpd_cotangent_to_xi(cage: CageMesh, state: DeformationState, d_cot) -> np.ndarray:
    """Pull a cotangent on per-element unit LPDs back to deformed vertex positions."""
    norm = np.linalg.norm(state.grad_g, axis=1)
    ok = ~state.degenerate
    d = state.lpd
    g_cot = np.zeros_like(d_cot)
    g_cot[ok] = (d_cot[ok] - np.einsum("ij,ij->i", d_cot[ok], d[ok])[:, None] * d[ok]) / norm[ok, None]
    per_vertex = np.einsum("eij,ej->ei", cage.shape_gradients, g_cot)
    out = np.zeros((cage.n_vertices, 3))
    out[:, 2] = np.bincount(cage.tets.ravel(), per_vertex.ravel(), minlength=cage.n_vertices)
    return out


def backprop_deform(system: DeformationSystem, state: DeformationState, xi_cot):
    """Adjoint of ``deform``: (dL/dq, dL/ds) per element from dL/dxi."""
    xi_cot = np.asarray(xi_cot, float)
    if not np.isfinite(xi_cot).all():
        raise DeformationError("non-finite cotangent")
    cage = system.cage
    mu = system.solve(xi_cot)
    b_cot = (system.A @ mu).reshape(cage.n_elements, 4, 3)
    t_cot = np.transpose(b_cot, (0, 2, 1))  # (n_el, 3, 4) like targets
    SM = state.s[:, :, None] * cage.centered
    R_cot = np.einsum("eik,ejk->eij", t_cot, SM)
    s_cot = np.einsum("eij,eik,ejk->ej", state.R, t_cot, cage.centered)
    q_cot = np.einsum("eaij,eij->ea", quat_matrix_jacobian(state.q), R_cot)
    return q_cot, s_cot


def condition_estimate(system: DeformationSystem, iters: int = 200, seed: int = 0) -> float:
    """lambda_max / lambda_min of the system matrix by power and inverse iteration."""
    rng = np.random.default_rng(seed)
    n = system.M.shape[0]
    v = rng.standard_normal(n)
    lam_max = 0.0
    for _ in range(iters):
        w = system.M @ v
        lam_max = np.linalg.norm(w)
        v = w / lam_max
    v = rng.standard_normal(n)
    mu = 0.0
    for _ in range(iters):
        w = system.solve(v)
        mu = np.linalg.norm(w)
        v = w / mu
    return float(lam_max * mu)

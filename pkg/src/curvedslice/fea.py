"""Voxel linear-elasticity FEA for maximal principal stress directions.

Each occupied voxel is an 8-node trilinear hexahedron; K u = f is solved by
Jacobi-preconditioned conjugate gradients and the stress is sampled at the
element centers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import cg

logger = logging.getLogger(__name__)

MAX_VOXELS = 20_000_000
_HEX_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


class FeaError(RuntimeError):
    pass


class SingularSystemError(FeaError):
    def __init__(self, msg, components=()):
        super().__init__(msg)
        self.components = list(components)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    origin: np.ndarray
    h: float
    occupancy: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.occupancy.shape)

    @property
    def n_occupied(self) -> int:
        return int(self.occupancy.sum())

    def cell_centers(self, ijk) -> np.ndarray:
        return self.origin + self.h * (np.asarray(ijk, float) + 0.5)


@dataclass
class Material:
    E: float = 3.5e9
    nu: float = 0.35

    def __post_init__(self):
        if not (self.E > 0 and 0 <= self.nu < 0.5):
            raise ValueError("material needs E > 0 and 0 <= nu < 0.5")

    def elasticity(self) -> np.ndarray:
        E, nu = self.E, self.nu
        lam = E * nu / ((1 + nu) * (1 - 2 * nu))
        mu = E / (2 * (1 + nu))
        D = np.zeros((6, 6))
        D[:3, :3] = lam
        D[np.arange(3), np.arange(3)] += 2 * mu
        D[np.arange(3, 6), np.arange(3, 6)] = mu
        return D


@dataclass
class BoundaryConditions:
    """Fixed regions and loads as axis-aligned boxes in model units.

    ``fixed`` entries: ``{"box": [[x0, y0, z0], [x1, y1, z1]], "dofs": [0, 1, 2]}``
    (``dofs`` optional, default all three). ``loads`` entries:
    ``{"box": ..., "force": [fx, fy, fz]}`` with the total force in newtons.
    """

    fixed: list = field(default_factory=list)
    loads: list = field(default_factory=list)
    material: Material = field(default_factory=Material)

    @classmethod
    def from_dict(cls, doc: dict) -> "BoundaryConditions":
        mat = doc.get("material", {})
        return cls(list(doc.get("fixed", [])), list(doc.get("loads", [])),
                   Material(float(mat.get("E", 3.5e9)), float(mat.get("nu", 0.35))))


@dataclass(frozen=True, eq=False)
class StressField:
    grid: VoxelGrid
    voxels: np.ndarray  # (n, 3) integer indices of occupied voxels
    stress: np.ndarray  # (n, 3, 3) Cauchy stress
    displacement: np.ndarray | None = None
    reactions: np.ndarray | None = None  # (n_nodes, 3), nonzero only at fixed dofs
    applied: np.ndarray | None = None
    nodes: np.ndarray | None = None  # (n_nodes, 3) coordinates matching displacement rows

    @property
    def points(self) -> np.ndarray:
        return self.grid.cell_centers(self.voxels)

    @property
    def voxel_volume(self) -> float:
        return self.grid.h ** 3

    def principal(self):
        """Eigenvalues (ascending) and eigenvectors (columns) per voxel."""
        return np.linalg.eigh(self.stress)

    @property
    def tau_max(self) -> np.ndarray:
        return self._max_principal()[1]

    @property
    def sigma_max(self) -> np.ndarray:
        return self._max_principal()[0]

    def _max_principal(self):
        w, v = self.principal()
        k = np.argmax(np.abs(w), axis=1)
        rows = np.arange(len(w))
        return w[rows, k], v[rows, :, k]


def voxelize(solid, h: float) -> VoxelGrid:
    """Occupancy by cell-center test H <= 0 on a grid padded by one cell."""
    if not h > 0:
        raise ValueError("voxel size must be positive")
    lo, hi = solid.bbox
    origin = lo - h
    dims = np.ceil((hi - lo) / h - 1e-9).astype(int) + 2
    if np.prod(dims.astype(float)) > MAX_VOXELS:
        raise FeaError(f"voxel grid {tuple(dims)} exceeds the memory budget")
    axes = [origin[k] + h * (np.arange(dims[k]) + 0.5) for k in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    occ = (solid.h(pts) <= 0).reshape(dims)
    grid = VoxelGrid(np.asarray(origin, float), float(h), occ)
    if not occ.any():
        raise FeaError("voxelization is empty")
    return grid


# ---------------------------------------------------------------------------
# element


def _shape_derivs(xi):
    """dN/dxi for the 8 trilinear shape functions at reference point xi in [-1, 1]^3."""
    s = 2 * _HEX_CORNERS - 1
    d = np.empty((8, 3))
    for k in range(3):
        a, b = [j for j in range(3) if j != k]
        d[:, k] = s[:, k] * (1 + s[:, a] * xi[a]) * (1 + s[:, b] * xi[b]) / 8.0
    return d


def _strain_matrix(h, xi):
    dN = _shape_derivs(xi) * (2.0 / h)
    B = np.zeros((6, 24))
    for n in range(8):
        dx, dy, dz = dN[n]
        c = 3 * n
        B[0, c] = dx
        B[1, c + 1] = dy
        B[2, c + 2] = dz
        B[3, c], B[3, c + 1] = dy, dx
        B[4, c + 1], B[4, c + 2] = dz, dy
        B[5, c], B[5, c + 2] = dz, dx
    return B


def hex_stiffness(h: float, material: Material) -> np.ndarray:
    D = material.elasticity()
    g = 1 / math.sqrt(3)
    K = np.zeros((24, 24))
    jac = (h / 2) ** 3
    for xi in _HEX_CORNERS * 2 * g - g:
        B = _strain_matrix(h, xi)
        K += B.T @ D @ B * jac
    return K


def _voigt_to_tensor(s):
    t = np.empty(s.shape[:-1] + (3, 3))
    t[..., 0, 0], t[..., 1, 1], t[..., 2, 2] = s[..., 0], s[..., 1], s[..., 2]
    t[..., 0, 1] = t[..., 1, 0] = s[..., 3]
    t[..., 1, 2] = t[..., 2, 1] = s[..., 4]
    t[..., 0, 2] = t[..., 2, 0] = s[..., 5]
    return t


def _box_mask(points, box, tol):
    lo, hi = np.asarray(box[0], float) - tol, np.asarray(box[1], float) + tol
    return ((points >= lo) & (points <= hi)).all(axis=1)


def solve_elasticity(grid: VoxelGrid, bc: BoundaryConditions, rtol=1e-6, maxiter=None) -> StressField:
    """Assemble, solve and post-process the voxel model; raises on singular or diverging systems."""
    voxels = np.argwhere(grid.occupancy)
    n_el = len(voxels)
    if not n_el:
        raise FeaError("no occupied voxels")
    node_dims = np.array(grid.dims) + 1
    flat = np.ravel_multi_index((voxels[:, None, :] + _HEX_CORNERS).reshape(-1, 3).T, node_dims)
    used, conn = np.unique(flat, return_inverse=True)
    conn = conn.reshape(n_el, 8)
    n_nodes = len(used)
    nodes = grid.origin + grid.h * np.column_stack(np.unravel_index(used, node_dims))
    tol = 1e-6 * grid.h

    fixed = np.zeros((n_nodes, 3), bool)
    for reg in bc.fixed:
        m = _box_mask(nodes, reg["box"], tol)
        for d in reg.get("dofs", (0, 1, 2)):
            fixed[m, d] = True
    if not fixed.any():
        raise SingularSystemError("no fixed region intersects the model; rigid motions are unconstrained")

    # every connected component must be anchored
    labels, n_comp = ndimage.label(grid.occupancy, structure=np.ones((3, 3, 3), bool))
    el_label = labels[tuple(voxels.T)]
    anchored = np.zeros(n_comp + 1, bool)
    anchored[el_label[fixed[conn].any(axis=(1, 2))]] = True
    free_comps = [c for c in range(1, n_comp + 1) if not anchored[c]]
    if free_comps:
        raise SingularSystemError(f"free-floating components {free_comps}", free_comps)

    incident = np.bincount(conn.ravel(), minlength=n_nodes).astype(float)
    f = np.zeros((n_nodes, 3))
    for load in bc.loads:
        m = _box_mask(nodes, load["box"], tol)
        if not m.any():
            raise FeaError(f"load region {load['box']} misses the model")
        w = incident * m
        f += np.outer(w / w.sum(), np.asarray(load["force"], float))
    if not bc.loads:
        logger.warning("no loads given; displacement is zero")

    Ke = hex_stiffness(grid.h, bc.material)
    dofs = (3 * conn[:, :, None] + np.arange(3)).reshape(n_el, 24)
    rows = np.repeat(dofs, 24, axis=1).ravel()
    cols = np.tile(dofs, (1, 24)).ravel()
    K = sp.csr_matrix((np.tile(Ke.ravel(), n_el), (rows, cols)), shape=(3 * n_nodes,) * 2)

    free = ~fixed.ravel()
    u = np.zeros(3 * n_nodes)
    rhs = f.ravel()[free]
    if np.any(rhs):
        Kff = K[free][:, free].tocsr()
        diag = Kff.diagonal()
        M = sp.diags(1.0 / diag)
        sol, info = cg(Kff, rhs, rtol=rtol, atol=0.0, maxiter=maxiter or 20 * len(rhs), M=M)
        if info != 0:
            raise FeaError(f"conjugate gradients did not converge (info={info})")
        u[free] = sol
    reactions = (K @ u - f.ravel()).reshape(-1, 3)
    reactions[~fixed] = 0.0

    D = bc.material.elasticity()
    B0 = _strain_matrix(grid.h, np.zeros(3))
    strain = np.einsum("ij,ej->ei", B0, u[dofs])
    stress = _voigt_to_tensor(strain @ D.T)
    return StressField(grid, voxels, stress, u.reshape(-1, 3), reactions, f, nodes)


def select_top_stress_region(stress_field: StressField, fraction: float = 0.1):
    """Voxels with the largest |max principal stress|; ties keep voxel order."""
    from .losses import SampleSetT

    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    n = len(stress_field.voxels)
    if n == 0:
        raise FeaError("empty stress field")
    count = math.ceil(fraction * n - 1e-9)
    order = np.argsort(-np.abs(stress_field.sigma_max), kind="stable")[:count]
    order.sort()
    return SampleSetT(
        points=stress_field.points[order],
        tau=stress_field.tau_max[order],
        volumes=np.full(count, stress_field.voxel_volume),
    )


# ---------------------------------------------------------------------------
# stress-field files


def write_stress_field(path, stress_field: StressField) -> None:
    g = stress_field.grid
    s = stress_field.stress
    lines = [
        "# voxel stress field: voxel i j k sxx syy szz sxy syz sxz\n",
        "origin {!r} {!r} {!r}\n".format(*g.origin.tolist()),
        f"h {g.h!r}\n",
        "dims {} {} {}\n".format(*g.dims),
    ]
    for (i, j, k), t in zip(stress_field.voxels.tolist(), s.tolist()):
        vals = (t[0][0], t[1][1], t[2][2], t[0][1], t[1][2], t[0][2])
        lines.append(f"voxel {i} {j} {k} " + " ".join(repr(v) for v in vals) + "\n")
    Path(path).write_text("".join(lines))


def read_stress_field(path) -> StressField:
    origin = h = dims = None
    vox, vals = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "origin":
                    origin = np.array([float(p) for p in parts[1:4]])
                elif parts[0] == "h":
                    h = float(parts[1])
                elif parts[0] == "dims":
                    dims = tuple(int(p) for p in parts[1:4])
                elif parts[0] == "voxel":
                    vox.append([int(p) for p in parts[1:4]])
                    vals.append([float(p) for p in parts[4:10]])
                    if len(vals[-1]) != 6:
                        raise ValueError("expected six stress components")
                else:
                    raise ValueError(f"unknown record {parts[0]!r}")
            except ValueError as exc:
                raise FeaError(f"{path}:{lineno}: {exc}") from exc
    if origin is None or h is None or dims is None:
        raise FeaError(f"{path}: missing origin/h/dims header")
    vox = np.asarray(vox, int).reshape(-1, 3)
    occ = np.zeros(dims, bool)
    occ[tuple(vox.T)] = True
    vals = np.asarray(vals, float).reshape(-1, 6)
    # file order is sxx syy szz sxy syz sxz, same as the internal Voigt order
    return StressField(VoxelGrid(origin, h, occ), vox, _voigt_to_tensor(vals))

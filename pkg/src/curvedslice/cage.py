"""Tetrahedral caging meshes: generation from a solid, I/O, element geometry and point location."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import ndimage

from .meshio import MeshFormatError, read_node_ele, read_tet, write_tet

logger = logging.getLogger(__name__)

# centering operator N = I - 1/4
CENTERING = np.eye(4) - 0.25
MAX_GRID_CELLS = 64_000_000


class CageError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BarycentricLocation:
    element: int
    coords: np.ndarray


@dataclass(frozen=True, eq=False)
class CageMesh:
    vertices: np.ndarray
    tets: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.ascontiguousarray(self.vertices, float))
        object.__setattr__(self, "tets", np.ascontiguousarray(self.tets, np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.tets)

    @cached_property
    def corners(self) -> np.ndarray:
        return self.vertices[self.tets]

    @cached_property
    def signed_volumes(self) -> np.ndarray:
        c = self.corners
        return np.linalg.det(c[:, 1:] - c[:, :1]) / 6.0

    @cached_property
    def volumes(self) -> np.ndarray:
        return np.abs(self.signed_volumes)

    @cached_property
    def centers(self) -> np.ndarray:
        return self.corners.mean(axis=1)

    @cached_property
    def centered(self) -> np.ndarray:
        """(N V_e)^T per element, shape (n, 3, 4): columns are corners minus centroid."""
        return np.einsum("ij,ejk->eki", CENTERING, self.corners)

    @cached_property
    def _edge_inv(self) -> np.ndarray:
        c = self.corners
        # columns are v1-v0, v2-v0, v3-v0
        return np.linalg.inv(np.transpose(c[:, 1:] - c[:, :1], (0, 2, 1)))

    @cached_property
    def shape_gradients(self) -> np.ndarray:
        """Gradients of the four barycentric functions per element, shape (n, 4, 3)."""
        inv = self._edge_inv
        g = np.empty((self.n_elements, 4, 3))
        g[:, 1:] = inv
        g[:, 0] = -inv.sum(axis=1)
        return g

    @cached_property
    def bbox(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def diagonal(self) -> float:
        lo, hi = self.bbox
        return float(np.linalg.norm(hi - lo))

    @cached_property
    def mean_edge(self) -> float:
        c = self.corners
        pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
        return float(np.mean([np.linalg.norm(c[:, i] - c[:, j], axis=1).mean() for i, j in pairs]))

    @cached_property
    def _adjacency(self):
        faces = np.concatenate([self.tets[:, [1, 2, 3]], self.tets[:, [0, 2, 3]],
                                self.tets[:, [0, 1, 3]], self.tets[:, [0, 1, 2]]])
        owner = np.tile(np.arange(self.n_elements), 4)
        key = np.sort(faces, axis=1)
        uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inv = inv.ravel()
        if (counts > 2).any():
            raise CageError("non-manifold cage: a face is shared by more than two tets")
        order = np.argsort(inv, kind="stable")
        inv_sorted = inv[order]
        first = np.searchsorted(inv_sorted, np.flatnonzero(counts == 2))
        a, b = owner[order[first]], owner[order[first + 1]]
        pairs = np.stack([np.minimum(a, b), np.maximum(a, b)], 1)
        shared = uniq[counts == 2]
        srt = np.lexsort((pairs[:, 1], pairs[:, 0]))
        pairs, shared = pairs[srt], shared[srt]
        p = self.vertices[shared]
        nrm = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        flip = np.einsum("ij,ij->i", nrm, self.centers[pairs[:, 1]] - self.centers[pairs[:, 0]]) < 0
        nrm[flip] *= -1
        return pairs, shared, nrm, int((counts == 1).sum())

    @property
    def adjacency(self) -> np.ndarray:
        """Element pairs (L, R) sharing a triangle, L < R, sorted."""
        return self._adjacency[0]

    @property
    def shared_faces(self) -> np.ndarray:
        return self._adjacency[1]

    @property
    def face_normals(self) -> np.ndarray:
        """Unit normal of each shared triangle pointing from element L into R."""
        return self._adjacency[2]

    @property
    def n_boundary_faces(self) -> int:
        return self._adjacency[3]

    def check(self) -> None:
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= self.n_vertices):
            raise CageError("tet index out of range")
        used = np.zeros(self.n_vertices, bool)
        used[self.tets.ravel()] = True
        if not used.all():
            raise CageError(f"{int((~used).sum())} dangling vertices")
        if (self.signed_volumes <= 0).any():
            raise CageError(f"{int((self.signed_volumes <= 0).sum())} inverted or flat tets")

    # -- point location ----------------------------------------------------

    @cached_property
    def _grid(self):
        c = self.corners
        lo_t, hi_t = c.min(axis=1), c.max(axis=1)
        cell = float((hi_t - lo_t).mean())
        origin = self.vertices.min(axis=0)
        dims = np.maximum(np.ceil((self.vertices.max(axis=0) - origin) / cell).astype(int), 1)
        i0 = np.clip(np.floor((lo_t - origin) / cell).astype(int), 0, dims - 1)
        i1 = np.clip(np.floor((hi_t - origin) / cell).astype(int), 0, dims - 1)
        cells, owners = [], []
        span = i1 - i0 + 1
        for dx in range(span[:, 0].max()):
            for dy in range(span[:, 1].max()):
                for dz in range(span[:, 2].max()):
                    ok = (dx < span[:, 0]) & (dy < span[:, 1]) & (dz < span[:, 2])
                    idx = i0[ok] + [dx, dy, dz]
                    cells.append(np.ravel_multi_index(idx.T, dims))
                    owners.append(np.flatnonzero(ok))
        cells, owners = np.concatenate(cells), np.concatenate(owners)
        order = np.lexsort((owners, cells))
        cells, owners = cells[order], owners[order]
        start = np.searchsorted(cells, np.arange(int(np.prod(dims)) + 1))
        return origin, cell, dims, start, owners

    def barycentric(self, elements, x) -> np.ndarray:
        v0 = self.corners[elements, 0]
        a = np.einsum("...ij,...j->...i", self._edge_inv[elements], x - v0)
        return np.concatenate([1.0 - a.sum(axis=-1, keepdims=True), a], axis=-1)

    def locate(self, points, tol=1e-12) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized location: (element ids with -1 for not found, barycentric coords)."""
        x = np.atleast_2d(np.asarray(points, float))
        origin, cell, dims, start, owners = self._grid
        ijk = np.floor((x - origin) / cell).astype(int)
        inside_grid = ((ijk >= -1) & (ijk <= dims)).all(axis=1)
        ijk = np.clip(ijk, 0, dims - 1)
        cid = np.ravel_multi_index(ijk.T, dims)
        lo, hi = start[cid], start[cid + 1]
        count = np.where(inside_grid, hi - lo, 0)
        elem = np.full(len(x), -1)
        coords = np.zeros((len(x), 4))
        kmax = int(count.max()) if len(x) else 0
        pending = np.ones(len(x), bool)
        for k in range(kmax):
            sel = np.flatnonzero(pending & (count > k))
            if not len(sel):
                break
            cand = owners[lo[sel] + k]
            a = self.barycentric(cand, x[sel])
            hit = (a >= -tol).all(axis=1)
            elem[sel[hit]] = cand[hit]
            coords[sel[hit]] = a[hit]
            pending[sel[hit]] = False
        return elem, coords


def locate_point(cage: CageMesh, x) -> BarycentricLocation | None:
    """Containing element and barycentric coordinates of one point, or None outside the cage."""
    e, a = cage.locate(np.asarray(x, float)[None])
    if e[0] < 0:
        return None
    return BarycentricLocation(int(e[0]), a[0])


def element_geometry(cage: CageMesh) -> dict:
    return {
        "centered": cage.centered,
        "volumes": cage.volumes,
        "centers": cage.centers,
        "adjacency": cage.adjacency,
        "shared_faces": cage.shared_faces,
        "face_normals": cage.face_normals,
    }


# -- construction ------------------------------------------------------------

# Kuhn split of the unit cube along its main diagonal; consistent across cubes
_CUBE_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


def _kuhn_tets():
    from itertools import permutations

    tets = []
    for perm in permutations(range(3)):
        path = [np.zeros(3, int)]
        for ax in perm:
            nxt = path[-1].copy()
            nxt[ax] = 1
            path.append(nxt)
        ids = [int(4 * p[0] + 2 * p[1] + p[2]) for p in path]
        if np.linalg.det(np.array(path[1:]) - path[0]) < 0:
            ids[1], ids[2] = ids[2], ids[1]
        tets.append(ids)
    return np.array(tets)


KUHN_TETS = _kuhn_tets()


def cage_from_voxels(occupancy, origin, voxel_size) -> CageMesh:
    """Split every occupied voxel into 6 tets sharing the cube's main diagonal."""
    occ = np.asarray(occupancy, bool)
    cells = np.argwhere(occ)
    if not len(cells):
        raise CageError("empty voxelization")
    node_dims = np.array(occ.shape) + 1
    corner_nodes = cells[:, None, :] + _CUBE_CORNERS[None]
    flat = np.ravel_multi_index(corner_nodes.reshape(-1, 3).T, node_dims).reshape(-1, 8)
    used, compact = np.unique(flat, return_inverse=True)
    compact = compact.reshape(-1, 8)
    tets = compact[:, KUHN_TETS].reshape(-1, 4)
    verts = np.asarray(origin, float) + voxel_size * np.column_stack(np.unravel_index(used, node_dims))
    return CageMesh(verts, tets)


def generate_cage(solid, voxel_size: float, dilation: int = 2) -> CageMesh:
    """Dilated-voxel cage around H <= 0.

    A voxel is seeded when H at its center is within half a voxel diagonal of
    the solid, so any voxel touching H <= 0 is kept before dilation.
    """
    if not voxel_size > 0:
        raise CageError("voxel_size must be positive")
    if dilation < 1:
        raise CageError("dilation must be >= 1")
    lo, hi = solid.bbox
    pad = dilation + 1
    origin = lo - pad * voxel_size
    dims = np.ceil((hi - lo) / voxel_size).astype(int) + 2 * pad
    if np.prod(dims.astype(float)) > MAX_GRID_CELLS:
        raise CageError(f"grid {tuple(dims)} exceeds the addressable cell budget")
    axes = [origin[k] + voxel_size * (np.arange(dims[k]) + 0.5) for k in range(3)]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    seed = (solid.h(centers) <= 0.5 * np.sqrt(3.0) * voxel_size).reshape(dims)
    if not seed.any():
        raise CageError("empty voxelization")
    occ = ndimage.binary_dilation(seed, structure=np.ones((3, 3, 3), bool), iterations=dilation)
    cage = cage_from_voxels(occ, origin, voxel_size)
    logger.info("cage: %d voxels -> %d tets, %d vertices", int(occ.sum()), cage.n_elements, cage.n_vertices)
    return cage


def load_cage(path, ele_path=None) -> CageMesh:
    """Load a cage from the native ``v``/``t`` format or a .node/.ele pair.

    Inverted tets are repaired by swapping two vertices (with a warning);
    dangling vertices and degenerate tets are errors.
    """
    path = Path(path)
    try:
        if path.suffix in (".node", ".ele"):
            verts, tets = read_node_ele(path.with_suffix(".node"), ele_path)
        else:
            verts, tets = read_tet(path)
    except (MeshFormatError, StopIteration, ValueError) as exc:
        raise CageError(f"cannot parse {path}: {exc}") from exc
    if not len(tets):
        raise CageError(f"{path}: no tets")
    if tets.min() < 0 or tets.max() >= len(verts):
        raise CageError(f"{path}: tet index out of range")
    c = verts[tets]
    vol = np.linalg.det(c[:, 1:] - c[:, :1])
    neg = vol < 0
    if neg.any():
        warnings.warn(f"{path}: reoriented {int(neg.sum())} inverted tets", stacklevel=2)
        tets = tets.copy()
        tets[neg, 2], tets[neg, 3] = tets[neg, 3], tets[neg, 2].copy()
    cage = CageMesh(verts, tets)
    cage.check()
    return cage


def save_cage(path, cage: CageMesh, vertices=None) -> None:
    write_tet(path, cage.vertices if vertices is None else vertices, cage.tets)

"""Shared builders for tests."""

from curvedslice import fields
from curvedslice.deformation import assemble_system


def identity_nets(cage, depth=2, width=16, seed=0, omega0=5.0):
    lo, hi = cage.bbox
    q = fields.init_network(fields.QUATERNION, depth, width, seed=seed, omega0=omega0, bounds=(lo, hi))
    s = fields.init_network(fields.SCALE, depth, width, seed=seed + 1, omega0=omega0, bounds=(lo, hi))
    return q, s


def system_for(cage, gamma=1e-2):
    return assemble_system(cage, gamma)


def random_small_cage(seed, shape=(3, 3, 3), jitter=0.2):
    """Jittered voxel cage with at most 6 * prod(shape) tets."""
    import numpy as np
    from curvedslice.cage import CageMesh, cage_from_voxels

    rng = np.random.default_rng(seed)
    cage = cage_from_voxels(np.ones(shape, bool), (0.0, 0.0, 0.0), 1.0)
    v = cage.vertices + rng.uniform(-jitter, jitter, cage.vertices.shape)
    return CageMesh(v, cage.tets)


def marching_oracle_errors(cage, values, iso):
    """Compare marching tets with per-tet plane clipping.

    Returns (max vertex distance either way, relative area error, counts).
    """
    import numpy as np
    from scipy.spatial import cKDTree
    from curvedslice.implicit import mesh_area
    from curvedslice.slicer import clip_tet_plane, extract_isosurface

    v, f, used = extract_isosurface(cage, values, iso)
    pts, area = [], 0.0
    for tet in cage.tets:
        poly = clip_tet_plane(cage.vertices[tet], values[tet], used)
        if poly is None:
            continue
        pts.append(poly)
        for k in range(1, len(poly) - 1):
            area += 0.5 * np.linalg.norm(np.cross(poly[k] - poly[0], poly[k + 1] - poly[0]))
    if not pts:
        return (0.0 if not len(v) else np.inf), (0.0 if not len(f) else np.inf), 0
    ref = np.vstack(pts)
    d1 = cKDTree(ref).query(v)[0].max()
    d2 = cKDTree(v).query(ref)[0].max()
    a = mesh_area(v, f)
    return max(d1, d2), abs(a - area) / area, len(f)

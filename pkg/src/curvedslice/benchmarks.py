"""Desk-scale benchmark scenes shared by the demos and the acceptance tests.

wedge     a prism whose right face overhangs the build platform (SF + PO)
bar       a box under uniaxial tension along x, stress samples from the voxel FEA (SR)
"""

from __future__ import annotations

import numpy as np

from . import fields
from .cage import generate_cage
from .fea import BoundaryConditions, Material, select_top_stress_region, solve_elasticity, voxelize
from .implicit import MeshSdf, extract_zero_surface, solid_from_nodes
from .losses import LossParams, LossWeights, sample_boundary
from .objective import make_scene
from .shapes import box_mesh, wedge_mesh
from .trainer import TrainConfig

# network and optimizer settings used for both benchmarks
NET_DEPTH, NET_WIDTH, OMEGA0 = 3, 32, 5.0
BENCH_LR = 3e-3


def wedge_scene(voxel_size=2.5, n_boundary=2000, seed=0, surface_resolution=48):
    """Wedge solid (~3.7k-tet cage at 2.5 mm) with SF + PO weights and no stress samples."""
    v, f = wedge_mesh()
    solid = solid_from_nodes(MeshSdf(v, f))
    cage = generate_cage(solid, voxel_size, 1)
    B = sample_boundary(solid, extract_zero_surface(solid, surface_resolution), n_boundary,
                        platform_z=0.0, seed=seed)
    return solid, make_scene(cage, B, None, LossParams(), LossWeights(sr=0))


def bar_scene(length=40.0, width=8.0, voxel_size=2.5, fea_voxel=2.0, force=100.0, fraction=0.1,
              n_boundary=500, seed=0):
    """Box bar pulled along x; only the SR term and the smoothness terms are weighted."""
    v, f = box_mesh((0, 0, 0), (length, width, width))
    solid = solid_from_nodes(MeshSdf(v, f))
    eps = 1e-2
    bc = BoundaryConditions(
        fixed=[{"box": [[-1, -1, -1], [eps, width + 1, width + 1]], "dofs": [0]},
               {"box": [[-1, -1, -1], [eps, eps, eps]], "dofs": [1, 2]},
               {"box": [[-1, width - eps, -1], [eps, width + 1, eps]], "dofs": [2]}],
        loads=[{"box": [[length - eps, -1, -1], [length + 1, width + 1, width + 1]],
                "force": [force, 0, 0]}],
        material=Material(1000.0, 0.3))
    stress = solve_elasticity(voxelize(solid, fea_voxel), bc)
    T = select_top_stress_region(stress, fraction)
    cage = generate_cage(solid, voxel_size, 1)
    B = sample_boundary(solid, extract_zero_surface(solid, 32), n_boundary, platform_z=0.0, seed=seed)
    weights = LossWeights(sf=0, po=0, sr=1)
    return solid, make_scene(cage, B, T, LossParams(), weights), stress


def benchmark_nets(cage, seed=1):
    lo, hi = cage.bbox
    q = fields.init_network(fields.QUATERNION, NET_DEPTH, NET_WIDTH, seed=seed, omega0=OMEGA0, bounds=(lo, hi))
    s = fields.init_network(fields.SCALE, NET_DEPTH, NET_WIDTH, seed=seed + 1, omega0=OMEGA0, bounds=(lo, hi))
    return q, s


def tilt_target(cage, degrees):
    """Planar field tilted about y: level sets lean towards +x by ``degrees``."""
    th = np.radians(degrees)
    x = cage.vertices
    return np.cos(th) * x[:, 2] + np.sin(th) * x[:, 0]


def benchmark_config(epochs=500, **kw) -> TrainConfig:
    return TrainConfig(epochs=epochs, lr=BENCH_LR, **kw)

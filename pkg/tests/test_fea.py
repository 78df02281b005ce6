import numpy as np
import pytest

from curvedslice import shapes
from curvedslice.fea import (BoundaryConditions, FeaError, Material, SingularSystemError, StressField, VoxelGrid,
                             read_stress_field, select_top_stress_region, solve_elasticity, voxelize,
                             write_stress_field)
from curvedslice.implicit import Capsule, ImplicitSolid, MeshSdf, solid_from_nodes

E = 1000.0


def box_grid(nx, ny, nz, h=1.0):
    return VoxelGrid(np.zeros(3), h, np.ones((nx, ny, nz), bool))


def cantilever(nx=40, ny=1, nz=4, P=1e-3):
    grid = box_grid(nx, ny, nz)
    bc = BoundaryConditions(
        fixed=[{"box": [[0, -1, -1], [0, ny + 1, nz + 1]]}],
        loads=[{"box": [[nx, -1, -1], [nx, ny + 1, nz + 1]], "force": [0, 0, -P]}],
        material=Material(E, 0.0))
    return grid, bc


def test_voxelize_unit_cube():
    v, f = shapes.box_mesh()
    g = voxelize(ImplicitSolid(MeshSdf(v, f)), 0.25)
    assert g.n_occupied == 64


def test_voxelize_sphere_volume():
    s = solid_from_nodes(Capsule((0, 0, 0), (0, 0, 0), 1.0))
    g = voxelize(s, 0.05)
    assert g.n_occupied * 0.05**3 == pytest.approx(4 * np.pi / 3, rel=0.02)


def test_voxelize_empty_is_error():
    s = ImplicitSolid(Capsule((0, 0, 0), (0, 0, 0), 0.01), np.zeros(3), np.ones(3) * 0.02)
    with pytest.raises(FeaError):
        voxelize(s, 1.0)


def test_fixed_voxel_no_load():
    grid = box_grid(1, 1, 1)
    bc = BoundaryConditions(fixed=[{"box": [[0, 0, 0], [1, 1, 0]]}])
    sf = solve_elasticity(grid, bc)
    assert not sf.displacement.any()
    assert not sf.stress.any()


def test_cantilever_euler_bernoulli():
    P = 1e-3
    grid, bc = cantilever(P=P)
    sf = solve_elasticity(grid, bc, rtol=1e-10)
    I = 1 * 4**3 / 12
    expect = P * 40**3 / (3 * E * I)
    tip = sf.nodes[:, 0] == 40
    got = -sf.displacement[tip, 2].mean()
    assert got == pytest.approx(expect, rel=0.15)


def test_uniaxial_bar():
    grid = box_grid(10, 2, 2)
    F = 4.0
    bc = BoundaryConditions(
        fixed=[{"box": [[0, -1, -1], [0, 3, 3]], "dofs": [0]},
               {"box": [[0, 0, 0], [0, 0, 0]], "dofs": [1, 2]},
               {"box": [[0, 2, 0], [0, 2, 0]], "dofs": [2]}],
        loads=[{"box": [[10, -1, -1], [10, 3, 3]], "force": [F, 0, 0]}],
        material=Material(E, 0.3))
    sf = solve_elasticity(grid, bc, rtol=1e-12)
    sxx = sf.stress[:, 0, 0]
    assert np.allclose(sxx, F / 4.0, rtol=0.01)
    assert np.allclose(np.abs(sf.tau_max[:, 0]), 1.0, atol=1e-6)
    # equilibrium: reactions balance applied loads
    net = sf.reactions.sum(axis=0) + sf.applied.sum(axis=0)
    assert np.linalg.norm(net) <= 1e-6 * F


def test_equilibrium_residual_cantilever():
    grid, bc = cantilever(P=1.0)
    sf = solve_elasticity(grid, bc, rtol=1e-10)
    net = sf.reactions.sum(axis=0) + sf.applied.sum(axis=0)
    assert np.linalg.norm(net) <= 1e-6 * np.linalg.norm(sf.applied.sum(axis=0))


def test_unanchored_is_singular():
    grid = box_grid(2, 1, 1)
    with pytest.raises(SingularSystemError):
        solve_elasticity(grid, BoundaryConditions(fixed=[{"box": [[50, 50, 50], [51, 51, 51]]}]))
    occ = np.zeros((5, 1, 1), bool)
    occ[[0, 1, 3, 4]] = True  # two separate bars
    g2 = VoxelGrid(np.zeros(3), 1.0, occ)
    with pytest.raises(SingularSystemError) as exc:
        solve_elasticity(g2, BoundaryConditions(fixed=[{"box": [[0, -1, -1], [0, 2, 2]]}],
                                                loads=[{"box": [[5, -1, -1], [5, 2, 2]], "force": [1, 0, 0]}]))
    assert exc.value.components


def test_missed_load_region():
    grid = box_grid(2, 1, 1)
    with pytest.raises(FeaError):
        solve_elasticity(grid, BoundaryConditions(fixed=[{"box": [[0, -1, -1], [0, 2, 2]]}],
                                                  loads=[{"box": [[9, 9, 9], [10, 10, 10]], "force": [1, 0, 0]}]))


def _uniform_field(n):
    grid = box_grid(n, 1, 1)
    stress = np.zeros((n, 3, 3))
    stress[:, 0, 0] = 2.0
    return StressField(grid, np.argwhere(grid.occupancy), stress)


def test_select_fraction_counts():
    sf = _uniform_field(1000)
    assert len(select_top_stress_region(sf, 1.0)) == 1000
    T = select_top_stress_region(sf, 0.1)
    assert len(T) == 100
    # ties: lowest voxel indices win, deterministically
    assert np.array_equal(T.points[:, 0], np.arange(100) + 0.5)
    T2 = select_top_stress_region(sf, 0.1)
    assert np.array_equal(T.points, T2.points)


def test_stress_file_roundtrip(tmp_path):
    grid, bc = cantilever(nx=6, P=1.0)
    sf = solve_elasticity(grid, bc)
    write_stress_field(tmp_path / "s.txt", sf)
    back = read_stress_field(tmp_path / "s.txt")
    assert np.array_equal(back.voxels, sf.voxels)
    assert np.array_equal(back.stress, sf.stress)
    (tmp_path / "bad.txt").write_text("origin 0 0 0\nh 1\n")
    with pytest.raises(FeaError):
        read_stress_field(tmp_path / "bad.txt")

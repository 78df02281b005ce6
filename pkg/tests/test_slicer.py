import json

import numpy as np
import pytest

from curvedslice import slicer as sl
from curvedslice.cage import CageMesh, generate_cage
from curvedslice.deformation import assemble_system, deform
from curvedslice.implicit import MeshSdf, Tube, mesh_area, solid_from_nodes
from curvedslice.losses import SampleSetB, SampleSetT
from curvedslice.meshio import read_obj
from curvedslice.shapes import box_mesh

from helpers import marching_oracle_errors, random_small_cage


def one_tet(values):
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    return CageMesh(v, np.array([[0, 1, 2, 3]])), np.asarray(values, float)


def test_single_vertex_case():
    cage, vals = one_tet([0, 0, 0, 1])
    v, f, iso = sl.extract_isosurface(cage, vals, 0.5)
    assert f.shape == (1, 3)
    expect = np.array([[0, 0, 0.5], [0.5, 0, 0.5], [0, 0.5, 0.5]])
    assert np.allclose(np.sort(v, axis=0), np.sort(expect, axis=0))
    n = np.cross(v[f[0, 1]] - v[f[0, 0]], v[f[0, 2]] - v[f[0, 0]])
    assert n[2] > 0  # oriented towards increasing values


def test_two_two_split():
    cage, vals = one_tet([-1, -1, 1, 1])
    v, f, _ = sl.extract_isosurface(cage, vals, 0.0)
    assert len(v) == 4 and f.shape == (2, 3)
    poly = sl.clip_tet_plane(cage.vertices, vals, 0.0)
    ref = sum(0.5 * np.linalg.norm(np.cross(poly[k] - poly[0], poly[k + 1] - poly[0])) for k in (1, 2))
    assert mesh_area(v, f) == pytest.approx(ref, rel=1e-12)


def test_no_crossing():
    cage, vals = one_tet([1, 2, 3, 4])
    v, f, _ = sl.extract_isosurface(cage, vals, 10.0)
    assert len(v) == 0 and len(f) == 0


@pytest.mark.parametrize("seed", range(5))
def test_marching_matches_oracle(seed):
    cage = random_small_cage(seed, (3, 3, 2))
    assert cage.n_elements <= 200
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal(cage.n_vertices)
    for iso in np.linspace(-1.5, 1.5, 10):
        dv, da, nf = marching_oracle_errors(cage, vals, iso)
        assert dv <= 1e-9 and da <= 1e-9


def test_shared_vertices_are_welded():
    cage = random_small_cage(3)
    vals = cage.vertices[:, 2] + 0.1 * np.sin(3 * cage.vertices[:, 0])
    v, f, _ = sl.extract_isosurface(cage, vals, 1.3)
    from collections import Counter
    edges = Counter(tuple(sorted(e)) for t in f for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])))
    assert max(edges.values()) <= 2
    assert len(np.unique(np.round(v, 12), axis=0)) == len(v)


def test_level_sets_do_not_interleave(rng):
    cage = random_small_cage(1)
    vals = rng.standard_normal(cage.n_vertices)
    for e in range(0, cage.n_elements, 17):
        c = cage.vertices[cage.tets[e]]
        gv = vals[cage.tets[e]]
        # along the gradient direction the linear field is monotone: crossing points sorted by iso
        g = np.linalg.lstsq(np.c_[c, np.ones(4)], gv, rcond=None)[0][:3]
        isos = np.linspace(gv.min(), gv.max(), 6)[1:-1]
        heights = []
        for iso in isos:
            poly = sl.clip_tet_plane(c, gv, iso)
            heights.append(poly.mean(axis=0) @ g)
        assert np.all(np.diff(heights) > 0)


# --- trimming

@pytest.fixture(scope="module")
def plane_grid():
    xs = np.linspace(-1.5, 1.5, 61)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    idx = np.arange(61 * 61).reshape(61, 61)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    faces = np.r_[np.c_[a, b, c], np.c_[a, c, d]]
    return np.c_[X.ravel(), Y.ravel()], faces


@pytest.mark.parametrize("h", [0.0, 0.3, 0.7])
def test_trim_sphere_section(sphere, plane_grid, h):
    xy, faces = plane_grid
    v = np.c_[xy, np.full(len(xy), h)]
    layer = sl.trim_layer(v, faces, sphere, h, 0)
    assert layer.area == pytest.approx(np.pi * (1 - h * h), rel=0.03)
    assert (sphere.h(layer.vertices) <= 1e-6 * sphere.diagonal).all()


def test_trim_inside_unchanged(sphere):
    v = np.array([[0.0, 0, 0], [0.1, 0, 0], [0, 0.1, 0]])
    f = np.array([[0, 1, 2]])
    layer = sl.trim_layer(v, f, sphere)
    assert np.array_equal(layer.vertices, v) and np.array_equal(layer.faces, f)


def test_trim_outside_empty(sphere):
    v = np.array([[3.0, 0, 0], [3.1, 0, 0], [3, 0.1, 0]])
    layer = sl.trim_layer(v, np.array([[0, 1, 2]]), sphere, 0.5, 4)
    assert layer.area == 0 and len(layer.faces) == 0 and layer.index == 4


# --- iso-value planning

@pytest.fixture(scope="module")
def slab():
    v, f = box_mesh((0, 0, 0), (6, 6, 10))
    solid = solid_from_nodes(MeshSdf(v, f))
    return solid, generate_cage(solid, 2.0, 1)


def test_identity_plan_uniform(slab):
    solid, cage = slab
    plan = sl.pick_isovalues(cage, cage.vertices, solid, 0.4, 1.0)
    assert len(plan.iso_values) >= 10
    assert np.allclose(np.diff(plan.iso_values), np.diff(plan.iso_values)[0])
    layers = sl.slice_field(cage, cage.vertices, solid, plan)
    inside = [ly for ly in layers if len(ly.vertices)]
    assert len(inside) >= 10
    for ly in inside:
        assert np.ptp(ly.vertices[:, 2]) <= 1e-9
        assert ly.area == pytest.approx(36.0, rel=1e-6)


def test_scaled_field_doubles_spacing(slab):
    solid, cage = slab
    sys = assemble_system(cage, 1e-6)
    n = cage.n_elements
    st = deform(sys, np.tile([1.0, 0, 0, 0], (n, 1)), np.tile([1.0, 1, 2], (n, 1)))
    p1 = sl.pick_isovalues(cage, cage.vertices, solid)
    p2 = sl.pick_isovalues(cage, st.xi, solid)
    assert np.diff(p2.iso_values).mean() == pytest.approx(2 * np.diff(p1.iso_values).mean(), rel=1e-3)
    assert len(p2.iso_values) == pytest.approx(len(p1.iso_values), abs=1)


def test_constant_field_infeasible(slab):
    solid, cage = slab
    xi = cage.vertices.copy()
    xi[:, 2] = 1.0
    with pytest.raises(sl.InfeasiblePlanError):
        sl.pick_isovalues(cage, xi, solid)


def test_thickness_band_infeasible(slab):
    solid, cage = slab
    xi = cage.vertices.copy()
    xi[:, 2] *= np.where(cage.vertices[:, 0] > 3, 4.0, 1.0)
    with pytest.raises(sl.InfeasiblePlanError) as err:
        sl.pick_isovalues(cage, xi, solid, t_min=0.9, t_max=1.0)
    assert len(err.value.elements)


# --- export

def test_export_deterministic(tmp_path, slab):
    solid, cage = slab
    plan = sl.pick_isovalues(cage, cage.vertices, solid)
    layers = sl.slice_field(cage, cage.vertices, solid, plan)[:3]
    m = sl.export_layers(layers, tmp_path / "a", plan)
    sl.export_layers(layers, tmp_path / "b", plan)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["000.obj", "001.obj", "002.obj", "manifest.json"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    for e in m["layers"]:
        v, f = read_obj(tmp_path / "a" / e["file"])
        assert mesh_area(v, f) == pytest.approx(e["area"], rel=1e-9, abs=1e-12)
    assert json.loads((tmp_path / "a" / "manifest.json").read_text()) == m


def test_export_empty_list(tmp_path):
    with pytest.raises(ValueError):
        sl.export_layers([], tmp_path)


# --- histograms

def test_cylinder_wall_angles():
    solid = solid_from_nodes(Tube((0.0, 0, 0), (0.0, 0, 10), 3.0, 2.0))
    rng = np.random.default_rng(0)
    th = rng.uniform(0, 2 * np.pi, 200)
    z = rng.uniform(1, 9, 200)
    pts = np.c_[3 * np.cos(th), 3 * np.sin(th), z]
    n = np.c_[np.cos(th), np.sin(th), np.zeros(200)]
    assert np.abs(solid.h(pts)).max() < 1e-9
    B = SampleSetB(pts, n, np.ones(200), np.zeros((200, 1), np.int64), np.ones(200, bool))
    rep = sl.report_histograms(B, SampleSetT.empty(), np.tile([0, 0, 1.0], (200, 1)), np.zeros((0, 3)))
    assert rep.sf_counts[90] == 200 and rep.sf_violating == 0


def test_sr_perpendicular_no_violation():
    T = SampleSetT(np.zeros((5, 3)), np.tile([1.0, 0, 0], (5, 1)), np.ones(5))
    B = SampleSetB(np.zeros((1, 3)), np.array([[1.0, 0, 0]]), np.ones(1), np.zeros((1, 1), np.int64),
                   np.ones(1, bool))
    rep = sl.report_histograms(B, T, np.array([[0, 0, 1.0]]), np.tile([0, 0, 1.0], (5, 1)))
    assert rep.sr_violating == 0 and rep.sr_counts[90] == 5
    csv = sl.histogram_csv(rep.sr_counts, rep.sr_weights).splitlines()
    assert csv[0] == "bin_start_deg,count,weight_sum" and len(csv) == 181

"""Acceptance criteria, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL ...`` line to the
terminal (pytest capture is bypassed) before asserting, so a plain
``pytest tests/test_acceptance.py -v`` shows the full scorecard.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from curvedslice import benchmarks as bm
from curvedslice import cli, gradcheck
from curvedslice import deformation as dfm
from curvedslice.cage import cage_from_voxels, generate_cage
from curvedslice.fea import BoundaryConditions, Material, VoxelGrid, solve_elasticity
from curvedslice.implicit import MeshSdf, solid_from_nodes
from curvedslice.losses import SampleSetB, SampleSetT, loss_sf, loss_sr
from curvedslice.objective import evaluate, sf_violating_fraction, sr_violating_fraction
from curvedslice.shapes import box_mesh
from curvedslice.slicer import pick_isovalues, slice_field
from curvedslice import trainer as tr

from helpers import identity_nets, marching_oracle_errors, random_small_cage


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        line = f"[criterion {n:>2}] {'PASS' if ok else 'FAIL'}  {detail}"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return emit


def test_c01_gradient_exactness(verdict):
    t0 = time.perf_counter()
    scene, q, s = gradcheck.small_scene(seed=0, depth=2, width=32)
    assert scene.cage.n_elements <= 200
    results = gradcheck.check_loss_paths(scene, q, s, tol=1e-4)
    results.append(gradcheck.check_deform_adjoint(scene, q, s))
    secs = time.perf_counter() - t0
    worst = max(r.max_rel_err for r in results)
    ok = all(r.passed for r in results) and secs <= 60
    detail = ", ".join(f"{r.path} {r.max_rel_err:.1e}" for r in results)
    verdict(1, ok, f"max rel err {worst:.2e} ({detail}); {secs:.1f} s <= 60 s")


def test_c02_identity_fixed_point(verdict):
    t0 = time.perf_counter()
    v, f = box_mesh((0, 0, 0), (8, 6, 10))
    solid = solid_from_nodes(MeshSdf(v, f))
    cage = generate_cage(solid, 2.0, 1)
    q, s = identity_nets(cage, depth=3, width=32)
    from curvedslice import fields
    st = dfm.deform(dfm.assemble_system(cage), fields.forward(q, cage.centers).value,
                    fields.forward(s, cage.centers).value)
    rel = np.linalg.norm(st.xi - cage.vertices) / np.linalg.norm(cage.vertices)
    pts = np.random.default_rng(0).uniform([0.1, 0.1, 0.1], [7.9, 5.9, 9.9], (500, 3))
    g_err = np.abs(dfm.scalar_field_value(st.xi, cage, pts) - pts[:, 2]).max()
    plan = pick_isovalues(cage, st.xi, solid)
    layers = [ly for ly in slice_field(cage, st.xi, solid, plan) if len(ly.faces)]
    flatness = max(np.ptp(ly.vertices[:, 2]) for ly in layers)
    secs = time.perf_counter() - t0
    ok = rel <= 1e-9 and g_err <= 1e-12 and flatness <= 1e-9 and len(layers) >= 10 and secs <= 5
    verdict(2, ok, f"|xi - xi0|/|xi0| = {rel:.1e}, max |G - z| = {g_err:.1e}, "
                   f"{len(layers)} layers with z spread <= {flatness:.1e}; {secs:.2f} s <= 5 s")


def test_c03_constant_rotation(verdict):
    gamma = 1e-3
    cage = cage_from_voxels(np.ones((6, 6, 6), bool), (0.0, 0.0, 0.0), 1.0)
    q = np.tile(dfm.axis_angle_quat([0, 0, 1], math.pi / 2), (cage.n_elements, 1))
    st = dfm.deform(dfm.assemble_system(cage, gamma), q, np.ones((cage.n_elements, 3)))
    c, x = cage.corners, st.xi[cage.tets]
    Dr = np.transpose(c[:, 1:] - c[:, :1], (0, 2, 1))
    Dd = np.transpose(x[:, 1:] - x[:, :1], (0, 2, 1))
    R = dfm.quat_to_matrix(q[0])
    err = np.linalg.norm(Dd @ np.linalg.inv(Dr) - R, axis=(1, 2)).max()
    verdict(3, err <= 10 * gamma, f"{cage.n_elements} tets, max ||F - R||_F = {err:.2e} <= {10 * gamma:.0e}")


def test_c04_sigmoid_anchors(verdict):
    beta, alpha = math.radians(10), math.radians(45)
    d = np.array([[0.0, 0.0, 1.0]])
    T = SampleSetT(np.zeros((1, 3)), np.array([[math.cos(beta), 0, math.sin(beta)]]), np.ones(1))
    sr = loss_sr(T, d, beta, 15.0)[0]
    n = np.array([[math.cos(alpha), 0, -math.sin(alpha)]])
    B = SampleSetB(np.zeros((1, 3)), n, np.ones(1), np.zeros((1, 1), np.int64), np.ones(1, bool))
    sf = loss_sf(B, d, alpha, 30.0)[0]
    verdict(4, sr == 0.5 and sf == 0.5, f"SR factor {sr!r}, SF factor {sf!r} (beta 10, k_SR 15, alpha 45, k_SF 30)")


# -- wedge benchmark -----------------------------------------------------------------


@pytest.fixture(scope="module")
def wedge_runs():
    _, scene = bm.wedge_scene()
    q, s = bm.benchmark_nets(scene.cage)
    ev0 = evaluate(scene, q, s, want_grad=False)
    out = {"scene": scene, "identity_vf": sf_violating_fraction(scene, ev0.state)}
    for name in ("identity", "pretrained"):
        q, s = bm.benchmark_nets(scene.cage)
        if name == "pretrained":
            tr.pretrain_fit(scene, q, s, bm.tilt_target(scene.cage, 25.0), 200, 1e-3)
        cfg = bm.benchmark_config(500)
        res = tr.optimize(scene, tr.new_state(q, s, cfg), cfg)
        out[name] = res
    return out


def _wedge_ok(res, vf0):
    vf = res.final.extras["sf_violating"]
    return vf0 >= 0.40 and vf <= 0.05 and res.final.ca == 0.0 and res.success and res.seconds <= 600, vf


@pytest.mark.slow
def test_c05_wedge_benchmark(verdict, wedge_runs):
    res, vf0 = wedge_runs["identity"], wedge_runs["identity_vf"]
    ok, vf = _wedge_ok(res, vf0)
    verdict(5, ok, f"{wedge_runs['scene'].cage.n_elements} tets, SF-violating {vf0:.1%} -> {vf:.1%}, "
                   f"L_CA = {res.final.ca:g}, {res.epochs_run} epochs, {res.seconds:.0f} s <= 600 s")


@pytest.mark.slow
def test_c06_initial_guess_robustness(verdict, wedge_runs):
    a, b = wedge_runs["identity"], wedge_runs["pretrained"]
    gap = abs(a.final.total - b.final.total) / max(a.final.total, b.final.total)
    ok_a, _ = _wedge_ok(a, wedge_runs["identity_vf"])
    ok_b, vf_b = _wedge_ok(b, wedge_runs["identity_vf"])
    verdict(6, gap <= 0.10 and ok_a and ok_b,
            f"final totals {a.final.total:.4f} (identity) vs {b.final.total:.4f} (pretrained tilt), "
            f"gap {gap:.1%} <= 10%; pretrained run SF-violating {vf_b:.1%}, L_CA = {b.final.ca:g}")


def test_c07_marching_oracle(verdict):
    worst_v, worst_a, faces = 0.0, 0.0, 0
    rng = np.random.default_rng(7)
    for seed in range(100):
        cage = random_small_cage(seed, (3, 3, 2))
        vals = rng.standard_normal(cage.n_vertices)
        for iso in rng.uniform(-1, 1, 3):
            dv, da, nf = marching_oracle_errors(cage, vals, iso)
            worst_v, worst_a, faces = max(worst_v, dv), max(worst_a, da), faces + nf
    ok = worst_v <= 1e-9 and worst_a <= 1e-9
    verdict(7, ok, f"100 cages, {faces} triangles: vertex gap {worst_v:.1e}, area rel err {worst_a:.1e}")


def test_c08_fea_sanity(verdict):
    E, P = 1000.0, 1e-3
    grid = VoxelGrid(np.zeros(3), 1.0, np.ones((40, 1, 4), bool))
    bc = BoundaryConditions(fixed=[{"box": [[0, -1, -1], [0, 2, 5]]}],
                            loads=[{"box": [[40, -1, -1], [40, 2, 5]], "force": [0, 0, -P]}],
                            material=Material(E, 0.0))
    sf = solve_elasticity(grid, bc, rtol=1e-10)
    eb = P * 40**3 / (3 * E * (4**3 / 12))
    tip = -sf.displacement[sf.nodes[:, 0] == 40, 2].mean()
    ratio = tip / eb
    eq = np.linalg.norm(sf.reactions.sum(axis=0) + sf.applied.sum(axis=0)) / P

    F = 4.0
    bar = VoxelGrid(np.zeros(3), 1.0, np.ones((10, 2, 2), bool))
    bc2 = BoundaryConditions(fixed=[{"box": [[0, -1, -1], [0, 3, 3]], "dofs": [0]},
                                    {"box": [[0, 0, 0], [0, 0, 0]], "dofs": [1, 2]},
                                    {"box": [[0, 2, 0], [0, 2, 0]], "dofs": [2]}],
                             loads=[{"box": [[10, -1, -1], [10, 3, 3]], "force": [F, 0, 0]}],
                             material=Material(E, 0.3))
    sb = solve_elasticity(bar, bc2, rtol=1e-12)
    sxx = np.abs(sb.stress[:, 0, 0] / (F / 4.0) - 1).max()
    eq2 = np.linalg.norm(sb.reactions.sum(axis=0) + sb.applied.sum(axis=0)) / F
    ok = abs(ratio - 1) <= 0.15 and sxx <= 0.01 and max(eq, eq2) <= 1e-6
    verdict(8, ok, f"cantilever tip / Euler-Bernoulli = {ratio:.3f}, bar sigma_xx err {sxx:.1e}, "
                   f"equilibrium residual {max(eq, eq2):.1e}")


@pytest.mark.slow
def test_c09_sr_alignment(verdict):
    _, scene, _ = bm.bar_scene()
    tau_x = np.abs(scene.T.tau[:, 0]).min()
    q, s = bm.benchmark_nets(scene.cage)
    vf_id = sr_violating_fraction(scene, evaluate(scene, q, s, want_grad=False).state)
    # start from a field tilted 45 deg towards the load axis so every stress sample violates
    tr.pretrain_fit(scene, q, s, bm.tilt_target(scene.cage, 45.0), 200, 3e-3)
    vf0 = sr_violating_fraction(scene, evaluate(scene, q, s, want_grad=False).state)
    cfg = bm.benchmark_config(100)
    res = tr.optimize(scene, tr.new_state(q, s, cfg), cfg)
    vf = res.final.extras["sr_violating"]
    ok = tau_x >= 1 - 1e-6 and vf <= 0.05
    verdict(9, ok, f"|T| = {len(scene.T)}, min |tau_x| = {tau_x:.6f}; violating fraction identity {vf_id:.0%}, "
                   f"tilted start {vf0:.0%} -> {vf:.1%} after {res.epochs_run} epochs "
                   f"(exit L_CA = {res.final.ca:.3g}, status: {res.status})")


def test_c10_determinism(verdict, tmp_path):
    doc = {
        "solid": {"primitives": [{"id": "ball", "kind": "sphere", "center": [0, 0, 5], "radius": 5}]},
        "cage": {"voxel_size": 2.5, "dilation": 1},
        "boundary": {"count": 300, "surface_resolution": 24},
        "weights": {"sr": 0},
        "trainer": {"epochs": 10},
        "seed": 3,
    }
    cfg = tmp_path / "job.json"
    cfg.write_text(json.dumps(doc))
    codes = []
    for run in ("a", "b"):
        for cmd in ("preprocess", "optimize", "slice"):
            codes.append(cli.run([cmd, "--config", str(cfg), "--out", str(tmp_path / run), "--threads", "1"]))
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a" / "slice").rglob("*") if p.is_file())
    files.append(Path("optimize/loss_log.csv"))
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    ok = all(c == 0 for c in codes) and all(same) and len(files) > 10
    verdict(10, ok, f"exit codes {codes}; {sum(same)}/{len(files)} layer/log files bit-identical")

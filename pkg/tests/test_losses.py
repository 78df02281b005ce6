import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from curvedslice import losses as L
from curvedslice.implicit import MeshSdf, extract_zero_surface, solid_from_nodes
from curvedslice.losses import LossBreakdown, LossParams, LossWeights, SampleSetB, SampleSetT
from curvedslice.shapes import box_mesh

B10 = math.radians(10)
A45 = math.radians(45)


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def T_of(tau, vols=None):
    tau = np.atleast_2d(tau)
    return SampleSetT(np.zeros_like(tau), tau, np.ones(len(tau)) if vols is None else vols)


# --- strength reinforcement

def test_sr_factor_anchors():
    d = np.array([[0.0, 0, 1]])
    perp = T_of([1.0, 0, 0])
    assert L.loss_sr(perp, d, B10, 15)[0] == pytest.approx(1 / (1 + math.exp(15 * math.sin(B10))), rel=1e-12)
    assert L.loss_sr(perp, d, B10, 15)[0] == pytest.approx(0.0688, abs=5e-4)
    edge = T_of([math.cos(B10), 0, math.sin(B10)])
    assert L.loss_sr(edge, d, B10, 15)[0] == 0.5
    par = T_of([0.0, 0, -1])
    assert L.loss_sr(par, d, B10, 15)[0] == pytest.approx(1.0, abs=1e-5)


def test_sr_empty():
    v, c = L.loss_sr(SampleSetT.empty(), np.zeros((0, 3)), B10)
    assert v == 0 and c.shape == (0, 3)


# --- support free

def test_sf_factor_anchors():
    d = np.array([[0.0, 0, 1]])
    assert L.sf_factor(np.array([[0.0, 0, 1]]), d, A45)[0] == pytest.approx(0.0, abs=1e-9)
    n_edge = np.array([[math.cos(A45), 0, -math.sin(A45)]])
    assert L.sf_factor(n_edge, d, A45)[0] == 0.5
    top = L.sf_factor(np.array([[0.0, 0, -1]]), d, A45)[0]
    assert top == pytest.approx(1 / (1 + math.exp(-30 * (1 - math.sin(A45)))), rel=1e-12)
    assert top > 0.9998


# --- point overhang

def line_set(points, nbrs, active=None):
    points = np.asarray(points, float)
    n = len(points)
    return SampleSetB(points, np.tile([0, 0, -1.0], (n, 1)), np.ones(n), np.asarray(nbrs),
                      np.ones(n, bool) if active is None else active)


def test_po_flat_plane_zero():
    pts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]
    B = line_set(pts, [[1, 2], [0, 3], [0, 3], [1, 2]])
    assert L.loss_po(B, np.tile([0, 0, 1.0], (4, 1)))[0] == 0


def test_po_lowest_point_of_sphere(sphere):
    B = L.sample_boundary(sphere, extract_zero_surface(sphere, 32), 400, seed=0)
    d = np.tile([0, 0, 1.0], (len(B), 1))
    low = int(np.argmin(B.points[:, 2]))
    one = SampleSetB(B.points, B.normals, B.areas, B.neighbors, np.arange(len(B)) == low)
    v, _ = L.loss_po(one, d)
    assert v > 0


def test_po_neighbor_below_gives_zero():
    B = line_set([[0, 0, 0], [0, 0, 1], [1, 0, -0.1]], [[1, 2], [0, 2], [0, 1]])
    d = np.tile([0, 0, 1.0], (3, 1))
    _, c = L.loss_po(B, d)
    vals = [L.loss_po(line_set(B.points, B.neighbors, np.arange(3) == i), d)[0] for i in range(3)]
    assert vals[0] == 0 and vals[2] > 0 and vals[1] == 0


# --- collision

def pair(a):
    nL = np.array([math.sin(a), 0, math.cos(a)])
    nR = np.array([-math.sin(a), 0, math.cos(a)])
    return np.array([[0, 1]]), np.array([[1.0, 0, 0]]), np.array([nL, nR])


def test_ca_flat_interface_zero():
    pairs, f, _ = pair(0.0)
    d = np.tile([0, 0, 1.0], (2, 1))
    v, c, skipped = L.loss_ca(pairs, f, d, math.radians(60))
    assert v == 0 and skipped == 1 and not c.any()
    assert L.ca_pair_values(np.zeros(1), math.radians(60))[0] == 0


def test_ca_constructed_pair():
    phi = math.radians(60)
    target = -math.sin(phi) - 0.1
    pairs, f, d = pair(0.5 * math.asin(target))
    t = L.concavity(d[:1], d[1:], f)[0][0]
    assert t == pytest.approx(target, abs=1e-12)
    v, _, _ = L.loss_ca(pairs, f, d, phi)
    assert v == pytest.approx(0.1, abs=1e-12)
    # obtuse head: only t + sin(phi) > 0 is penalised
    phi2 = math.radians(120)
    assert L.loss_ca(pairs, f, d, phi2)[0] == pytest.approx(max(0.0, target + math.sin(phi2)), abs=1e-12)
    # bowl opening toward the printing side
    pairs, f, d = pair(0.2)
    assert L.loss_ca(pairs, f, d, phi)[0] == pytest.approx(math.sin(0.4), abs=1e-12)


def test_ca_flat_head_penalises_any_positive_product():
    pairs, f, d = pair(0.05)
    v, c, _ = L.loss_ca(pairs, f, d, math.pi)
    assert v == pytest.approx(math.sin(0.1), abs=1e-12) and np.isfinite(c).all()


def test_ca_margin_and_validity():
    pairs, f, d = pair(-0.01)
    phi = math.radians(90)
    assert L.loss_ca(pairs, f, d, phi)[0] == 0
    assert L.loss_ca(pairs, f, d, phi, margin=0.1)[0] > 0
    assert L.loss_ca(pairs, f, d, phi, valid=np.array([True, False]))[0] == 0


# --- harmonic terms

def test_harmonic_s():
    pairs = np.array([[0, 1]])
    vols = np.ones(2)
    assert L.loss_harmonic_s(pairs, vols, np.ones((2, 3)))[0] == 0
    s = np.array([[1.1, 1, 1], [1.0, 1, 1]])
    assert L.loss_harmonic_s(pairs, vols, s)[0] == pytest.approx(0.01, abs=1e-14)
    assert L.loss_harmonic_s(pairs, 2 * vols, s)[0] == pytest.approx(0.02, abs=1e-14)


def test_harmonic_q():
    pairs = np.array([[0, 1]])
    vols = np.ones(2)
    q = np.array([[1.0, 0, 0, 0], [1.0, 0, 0, 0]])
    assert L.loss_harmonic_q(pairs, vols, q)[0] == 0
    q[1] = [0, 1, 0, 0]
    assert L.loss_harmonic_q(pairs, vols, q)[0] == pytest.approx(1.0)
    q[1] = [-1, 0, 0, 0]
    assert L.loss_harmonic_q(pairs, vols, q)[0] == pytest.approx(4.0)


# --- cotangents vs finite differences

def fd_check(f, x, cot, h=1e-7):
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        a, b = x.copy(), x.copy()
        a[idx] += h
        b[idx] -= h
        num[idx] = (f(a) - f(b)) / (2 * h)
    scale = max(np.abs(num).max(), 1e-3)
    return np.abs(num - cot).max() / scale


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_cotangents_fd(seed):
    rng = np.random.default_rng(seed)
    n = 6
    d = unit(rng.standard_normal((n, 3)))
    T = T_of(unit(rng.standard_normal((n, 3))), rng.uniform(0.5, 2, n))
    assert fd_check(lambda x: L.loss_sr(T, x, B10)[0], d, L.loss_sr(T, d, B10)[1]) < 1e-5
    B = SampleSetB(rng.standard_normal((n, 3)), unit(rng.standard_normal((n, 3))), rng.uniform(0.5, 2, n),
                   np.array([[(i + 1) % n, (i + 2) % n] for i in range(n)]), np.ones(n, bool))
    assert fd_check(lambda x: L.loss_sf(B, x, A45)[0], d, L.loss_sf(B, d, A45)[1]) < 1e-5
    pairs = np.array([[0, 1], [1, 2], [3, 4], [4, 5]])
    f = unit(rng.standard_normal((4, 3)))
    phi = math.radians(rng.choice([60, 90, 120]))
    v, c, _ = L.loss_ca(pairs, f, d, phi)
    t = L.concavity(d[pairs[:, 0]], d[pairs[:, 1]], f)[0]
    kinks = np.concatenate([t, t + math.sin(phi), -t - math.sin(phi)])
    if np.abs(kinks).min() > 1e-4:
        assert fd_check(lambda x: L.loss_ca(pairs, f, x, phi)[0], d, c) < 1e-5
    vols = rng.uniform(0.5, 2, n)
    s = rng.uniform(0.5, 2, (n, 3))
    assert fd_check(lambda x: L.loss_harmonic_s(pairs, vols, x)[0], s, L.loss_harmonic_s(pairs, vols, s)[1]) < 1e-5
    q = rng.standard_normal((n, 4))
    assert fd_check(lambda x: L.loss_harmonic_q(pairs, vols, x)[0], q, L.loss_harmonic_q(pairs, vols, q)[1]) < 1e-5


# --- sampling

def test_sample_boundary_sphere(sphere):
    B = L.sample_boundary(sphere, extract_zero_surface(sphere, 48), 1000, k=10, seed=3)
    assert len(B) == 1000 and B.neighbors.shape == (1000, 10)
    assert np.abs(sphere.h(B.points)).max() <= 1e-6 * sphere.diagonal
    ang = np.arccos(np.clip(np.einsum("ij,ij->i", B.normals, unit(B.points)), -1, 1))
    assert ang.max() <= 1e-3
    assert (B.neighbors != np.arange(1000)[:, None]).all()


def test_platform_samples_inactive():
    v, f = box_mesh((0, 0, 0), (2, 2, 0.5))
    solid = solid_from_nodes(MeshSdf(v, f))
    B = L.sample_boundary(solid, extract_zero_surface(solid, 32), 300, platform_z=0.0, seed=1)
    bottom = B.points[:, 2] < 1e-6
    assert bottom.any() and not B.active[bottom].any() and B.active[~bottom].all()


def test_farthest_point_subset_spread(rng):
    x = rng.random((500, 2))
    idx = L.farthest_point_subset(x, 50)
    assert len(np.unique(idx)) == 50
    from scipy.spatial.distance import pdist
    assert pdist(x[idx]).min() > pdist(x[rng.choice(500, 50, replace=False)]).min()


def test_sample_boundary_rejects_bad_args(sphere):
    surf = extract_zero_surface(sphere, 16)
    with pytest.raises(ValueError):
        L.sample_boundary(sphere, surf, 5, k=10)
    with pytest.raises(ValueError):
        L.sample_boundary(sphere, surf, 50, oversample=0)


# --- total

def test_total_loss_weights():
    b = LossBreakdown(sf=2.0, sr=3.0, po=5.0, hs=7.0, hq=11.0, ca=13.0)
    assert L.total_loss(b, LossWeights(0, 1, 0, 0, 0)) == 3.0
    assert L.total_loss(b, LossWeights(1, 0, 1, 1, 1)) == 2 + 5 + 7 + 11
    with pytest.raises(FloatingPointError):
        L.total_loss(LossBreakdown(sf=np.nan), LossWeights())


def test_params_radians():
    p = LossParams()
    assert p.alpha == pytest.approx(math.pi / 4) and p.beta == pytest.approx(B10)

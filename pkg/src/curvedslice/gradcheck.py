"""Finite-difference checks of the analytic gradients on a small scene."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import deformation as dfm
from . import fields
from .cage import cage_from_voxels
from .implicit import Capsule, extract_zero_surface, solid_from_nodes
from .losses import LossParams, LossWeights, SampleSetT, sample_boundary
from .objective import TERMS, evaluate, make_scene


@dataclass
class CheckResult:
    path: str
    max_rel_err: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err <= self.tol)

    def row(self) -> str:
        return f"{self.path:<10s} {self.max_rel_err:10.3e} {self.n_checked:7d}  {'PASS' if self.passed else 'FAIL'}"


def small_scene(seed: int = 0, depth: int = 2, width: int = 32, perturb: float = 0.3,
                n_boundary: int = 160, n_stress: int = 40):
    """~160-tet jittered cage around a sphere, synthetic stress samples, perturbed 2x32 nets."""
    rng = np.random.default_rng(seed)
    cage = cage_from_voxels(np.ones((3, 3, 3), bool), (-1.5, -1.5, -1.5), 1.0)
    # jitter interior vertices so the cage is not axis-aligned everywhere
    v = cage.vertices.copy()
    interior = (np.abs(v) < 1.4).all(axis=1)
    v[interior] += rng.uniform(-0.12, 0.12, (int(interior.sum()), 3))
    cage = type(cage)(v, cage.tets)
    cage.check()
    solid = solid_from_nodes(Capsule((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 1.0))
    B = sample_boundary(solid, extract_zero_surface(solid, 24), n_boundary, platform_z=-0.8, seed=seed)
    pts = rng.uniform(-0.6, 0.6, (n_stress, 3))
    tau = rng.standard_normal((n_stress, 3))
    tau /= np.linalg.norm(tau, axis=1, keepdims=True)
    T = SampleSetT(pts, tau, rng.uniform(0.5, 1.5, n_stress))
    scene = make_scene(cage, B, T, LossParams(), LossWeights(), gamma=1e-2)
    lo, hi = cage.bbox
    qnet = fields.init_network(fields.QUATERNION, depth, width, seed=seed + 1, bounds=(lo, hi))
    snet = fields.init_network(fields.SCALE, depth, width, seed=seed + 2, bounds=(lo, hi))
    for net in (qnet, snet):
        net.weights[-1][...] = rng.uniform(-perturb, perturb, net.weights[-1].shape) / np.sqrt(width)
        net.touch()
    return scene, qnet, snet


def _raw_terms(scene, qnet, snet):
    b = evaluate(scene, qnet, snet, want_grad=False).breakdown
    return np.array([getattr(b, t) for t in TERMS])


def check_loss_paths(scene, qnet, snet, h: float = 1e-6, tol: float = 1e-4, max_params=None,
                     seed: int = 0) -> list[CheckResult]:
    """Per-term analytic dL/dtheta vs central differences over network parameters.

    All parameters are checked unless ``max_params`` limits a random subset.
    The error is max |fd - analytic| divided by the largest analytic entry.
    """
    analytic = []
    for t in TERMS:
        ev = evaluate(scene, qnet, snet, coeffs={t: 1.0})
        analytic.append(ev.flat_grad())
    analytic = np.array(analytic)
    flat_q, flat_s = qnet.get_flat(), snet.get_flat()
    nq = len(flat_q)
    n = nq + len(flat_s)
    idx = np.arange(n)
    if max_params is not None and max_params < n:
        idx = np.sort(np.random.default_rng(seed).choice(n, max_params, replace=False))
    fd = np.zeros((len(TERMS), len(idx)))
    for col, i in enumerate(idx):
        net, flat, j = (qnet, flat_q, i) if i < nq else (snet, flat_s, i - nq)
        x0 = flat[j]
        flat[j] = x0 + h
        net.set_flat(flat)
        up = _raw_terms(scene, qnet, snet)
        flat[j] = x0 - h
        net.set_flat(flat)
        dn = _raw_terms(scene, qnet, snet)
        flat[j] = x0
        net.set_flat(flat)
        fd[:, col] = (up - dn) / (2 * h)
    out = []
    for k, t in enumerate(TERMS):
        a = analytic[k, idx]
        scale = np.abs(analytic[k]).max()
        err = np.abs(fd[k] - a).max() / scale if scale > 0 else (0.0 if not np.abs(fd[k]).any() else np.inf)
        out.append(CheckResult(t, float(err), len(idx), tol))
    return out


def check_deform_adjoint(scene, qnet, snet, h: float = 1e-6, tol: float = 1e-4, seed: int = 0) -> CheckResult:
    """dL/dq, dL/ds for L = sum(W * xi) against FD over every q and s component."""
    rng = np.random.default_rng(seed)
    cage, system = scene.cage, scene.system
    q = fields.forward(qnet, cage.centers).value
    s = fields.forward(snet, cage.centers).value
    W = rng.standard_normal((cage.n_vertices, 3))
    st = dfm.deform(system, q, s)
    gq, gs = dfm.backprop_deform(system, st, W)

    def L(qq, ss):
        return float(np.sum(W * dfm.deform(system, qq, ss).xi))

    err = 0.0
    scale = max(np.abs(gq).max(), np.abs(gs).max())
    for arr, g in ((q, gq), (s, gs)):
        for e in range(arr.shape[0]):
            for k in range(arr.shape[1]):
                x0 = arr[e, k]
                arr[e, k] = x0 + h
                up = L(q, s)
                arr[e, k] = x0 - h
                dn = L(q, s)
                arr[e, k] = x0
                err = max(err, abs((up - dn) / (2 * h) - g[e, k]) / scale)
    return CheckResult("deform", float(err), q.size + s.size, tol)


def check_single_element(gamma: float = 1e-2, tol: float = 1e-10, seed: int = 0) -> CheckResult:
    """One tet: xi = (N V S R^T + gamma N V) / (1 + gamma) + mean(V), so dxi/ds_k is closed form."""
    rng = np.random.default_rng(seed)
    cage = cage_from_voxels(np.ones((1, 1, 1), bool), (0, 0, 0), 1.0)
    cage = type(cage)(cage.vertices[cage.tets[0]], np.arange(4)[None])
    system = dfm.assemble_system(cage, gamma)
    q = rng.standard_normal((1, 4))
    q /= np.linalg.norm(q)
    s = rng.uniform(0.5, 2.0, (1, 3))
    W = rng.standard_normal((4, 3))
    st = dfm.deform(system, q, s)
    _, gs = dfm.backprop_deform(system, st, W)
    R = dfm.quat_to_matrix(q[0])
    NV = dfm.CENTERING @ cage.vertices
    expect = np.array([np.sum(W * (NV @ np.diag(np.eye(3)[k]) @ R.T)) / (1 + gamma) for k in range(3)])
    closed_xi = (NV @ np.diag(s[0]) @ R.T + gamma * NV) / (1 + gamma) + cage.vertices.mean(axis=0)
    err = max(np.abs(gs[0] - expect).max() / np.abs(expect).max(),
              np.abs(st.xi - closed_xi).max())
    return CheckResult("one-tet", float(err), 3, tol)


def run_all(seed: int = 0, max_params=None, tol: float = 1e-4):
    t0 = time.perf_counter()
    scene, qnet, snet = small_scene(seed)
    results = check_loss_paths(scene, qnet, snet, tol=tol, max_params=max_params, seed=seed)
    results.append(check_deform_adjoint(scene, qnet, snet, tol=tol, seed=seed))
    results.append(check_single_element(seed=seed))
    return results, time.perf_counter() - t0

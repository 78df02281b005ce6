"""Sample sets and loss terms on local printing directions (LPDs).

Every loss returns ``(value, cotangent)`` where the cotangent is the exact
derivative of the value with respect to the loss's direction/field inputs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

DEGENERATE_PAIR = 1e-10


@dataclass(frozen=True, eq=False)
class SampleSetB:
    """Boundary samples with outward normals, k-NN area weights and platform flags."""

    points: np.ndarray
    normals: np.ndarray
    areas: np.ndarray
    neighbors: np.ndarray
    active: np.ndarray
    dropped: int = 0

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class SampleSetT:
    """Stress samples at voxel centers with unit max-principal directions."""

    points: np.ndarray
    tau: np.ndarray
    volumes: np.ndarray

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))


@dataclass
class LossWeights:
    sf: float = 1.0
    sr: float = 1.0
    po: float = 1.0
    hs: float = 1.0
    hq: float = 1.0


@dataclass
class LossParams:
    alpha_deg: float = 45.0
    beta_deg: float = 10.0
    phi_deg: float = 90.0
    k_sf: float = 30.0
    k_sr: float = 15.0

    @property
    def alpha(self):
        return math.radians(self.alpha_deg)

    @property
    def beta(self):
        return math.radians(self.beta_deg)

    @property
    def phi(self):
        return math.radians(self.phi_deg)


@dataclass
class LossBreakdown:
    sf: float = 0.0
    sr: float = 0.0
    po: float = 0.0
    ca: float = 0.0
    hs: float = 0.0
    hq: float = 0.0
    total: float = 0.0
    degenerate: int = 0
    ca_skipped: int = 0
    extras: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        return {"L_SF": self.sf, "L_SR": self.sr, "L_PO": self.po, "L_HS": self.hs,
                "L_HQ": self.hq, "total": self.total, "L_CA": self.ca}


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# sampling


def farthest_point_subset(x, count: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point selection of ``count`` row indices of ``x``."""
    n = len(x)
    count = min(count, n)
    out = np.empty(count, np.int64)
    out[0] = start
    dmin = np.sum((x - x[start]) ** 2, axis=1)
    for i in range(1, count):
        j = int(np.argmax(dmin))
        out[i] = j
        np.minimum(dmin, np.sum((x - x[j]) ** 2, axis=1), out=dmin)
    return np.sort(out)


def sample_boundary(solid, zero_surface, count: int, platform_z=None, k: int = 10,
                    seed: int = 0, platform_tol=None, max_newton: int = 30,
                    oversample: int = 4) -> SampleSetB:
    """Evenly spread samples on the extracted surface, projected onto H = 0.

    ``oversample * count`` area-uniform random points are thinned to ``count``
    by farthest-point selection. Plain random points clump, and a clumped kNN
    neighbourhood makes points on flat inclined faces look like local minima
    to the point-overhang test. ``oversample=1`` keeps the random points.
    """
    verts, faces = zero_surface
    if count < k + 1:
        raise ValueError("count must exceed k")
    if len(faces) == 0:
        raise ValueError("zero surface is empty")
    if oversample < 1:
        raise ValueError("oversample must be >= 1")
    rng = np.random.default_rng(seed)
    tri = verts[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    n_raw = count * oversample
    pick = rng.choice(len(faces), size=n_raw, p=area / area.sum())
    r1, r2 = rng.random(n_raw), rng.random(n_raw)
    s1 = np.sqrt(r1)
    bary = np.column_stack([1 - s1, s1 * (1 - r2), s1 * r2])
    x = np.einsum("ni,nij->nj", bary, tri[pick])
    if oversample > 1:
        x = x[farthest_point_subset(x, count)]

    tol = 1e-6 * solid.diagonal
    done = np.zeros(count, bool)
    for _ in range(max_newton):
        act = np.flatnonzero(~done)
        if not len(act):
            break
        h = solid.h(x[act])
        conv = np.abs(h) <= tol
        done[act[conv]] = True
        act, h = act[~conv], h[~conv]
        if not len(act):
            break
        g, ok = solid.grad(x[act])
        gg = np.einsum("ij,ij->i", g, g)
        step = np.where(ok, h / np.where(ok, gg, 1.0), 0.0)
        x[act] -= step[:, None] * g
    done &= np.abs(solid.h(x)) <= tol
    g, ok = solid.grad(x)
    keep = done & ok
    dropped = int(count - keep.sum())
    if dropped:
        logger.info("sample_boundary: dropped %d samples (projection or gradient failure)", dropped)
    x, g = x[keep], g[keep]
    normals = g / np.linalg.norm(g, axis=1, keepdims=True)

    if len(x) < k + 1:
        raise ValueError("too few samples survived projection")
    dist, idx = cKDTree(x).query(x, k=k + 1)
    # drop self; with duplicates self may not be first, so filter explicitly
    nbr = np.empty((len(x), k), np.int64)
    d2 = np.empty((len(x), k))
    for row in range(len(x)):
        m = idx[row] != row
        nbr[row] = idx[row][m][:k]
        d2[row] = dist[row][m][:k] ** 2
    areas = d2.mean(axis=1)
    if platform_z is None:
        active = np.ones(len(x), bool)
    else:
        ptol = 1e-4 * solid.diagonal if platform_tol is None else platform_tol
        active = x[:, 2] > platform_z + ptol
    return SampleSetB(x, normals, areas, nbr, active, dropped)


# ---------------------------------------------------------------------------
# loss terms


def loss_sr(T: SampleSetT, d, beta: float, k_sr: float = 15.0):
    """Strength reinforcement: volume-weighted sigmoid of |d . tau| - sin(beta)."""
    if len(T) == 0:
        return 0.0, np.zeros((0, 3))
    dot = np.einsum("ij,ij->i", d, T.tau)
    z = k_sr * (np.abs(dot) - math.sin(beta))
    sg = sigmoid(z)
    val = float(np.sum(T.volumes * sg))
    cot = (T.volumes * sg * (1 - sg) * k_sr * np.sign(dot))[:, None] * T.tau
    return val, cot


def sf_factor(normals, d, alpha, k_sf=30.0):
    return sigmoid(k_sf * (-np.einsum("ij,ij->i", normals, d) - math.sin(alpha)))


def loss_sf(B: SampleSetB, d, alpha: float, k_sf: float = 30.0):
    """Support-free: area-weighted sigmoid of -n . d - sin(alpha) over active samples."""
    w = B.areas * B.active
    sg = sf_factor(B.normals, d, alpha, k_sf)
    val = float(np.sum(w * sg))
    cot = -(w * sg * (1 - sg) * k_sf)[:, None] * B.normals
    return val, cot


def loss_po(B: SampleSetB, d):
    """Point overhang: ReLU of the minimum neighbor offset along d (hard min)."""
    offs = B.points[B.neighbors] - B.points[:, None, :]
    proj = np.einsum("nkj,nj->nk", offs, d)
    j = np.argmin(proj, axis=1)
    rows = np.arange(len(d))
    m = proj[rows, j]
    gate = (m > 0) & B.active
    val = float(np.sum(B.areas * np.where(gate, m, 0.0)))
    cot = (B.areas * gate)[:, None] * offs[rows, j]
    return val, cot


def concavity(nL, nR, face_normal):
    """Triple product (nL x nR) . h with h the unit isoline direction on the shared face.

    ``face_normal`` points from the left element into the right one; h is built
    as normalize(mean(nL, nR) x f) with f oriented from right to left, so a
    bowl-shaped (concave) interface gives a positive value.
    Returns (t, cross, h, h_raw).
    """
    f = -face_normal
    nbar = 0.5 * (nL + nR)
    h_raw = np.cross(nbar, f)
    hn = np.linalg.norm(h_raw, axis=1)
    h = h_raw / np.where(hn > 0, hn, 1.0)[:, None]
    c = np.cross(nL, nR)
    t = np.einsum("ij,ij->i", c, h)
    return t, c, h, hn


def ca_pair_values(t, phi):
    if phi <= math.pi / 2:
        return np.maximum(0.0, t) + np.maximum(0.0, -t - math.sin(phi))
    return np.maximum(0.0, t + math.sin(phi))


def loss_ca(pairs, face_normals, d, phi: float, valid=None, margin: float = 0.0):
    """Local collision loss over adjacent element pairs.

    ``d`` holds per-element LPDs; ``valid`` masks out degenerate elements.
    ``margin`` shifts the feasibility boundary inward (used by the correction
    step to land strictly inside the feasible set). Returns (value, cotangent
    w.r.t. d, number of skipped pairs).
    """
    nL, nR = d[pairs[:, 0]], d[pairs[:, 1]]
    t, c, h, hn = concavity(nL, nR, face_normals)
    keep = (np.linalg.norm(c, axis=1) >= DEGENERATE_PAIR) & (hn >= DEGENERATE_PAIR)
    if valid is not None:
        keep &= valid[pairs[:, 0]] & valid[pairs[:, 1]]
    sphi = math.sin(phi)
    tm = t + margin
    if phi <= math.pi / 2:
        vals = np.maximum(0.0, tm) + np.maximum(0.0, -t - sphi + margin)
        dt = (tm > 0).astype(float) - (-t - sphi + margin > 0)
    else:
        vals = np.maximum(0.0, tm + sphi)
        dt = (tm + sphi > 0).astype(float)
    vals = np.where(keep, vals, 0.0)
    dt = np.where(keep, dt, 0.0)
    cot = np.zeros_like(d)
    if dt.any():
        gL = np.cross(nR, h)
        gR = np.cross(h, nL)
        # through h = h_raw / |h_raw|, h_raw = nbar x f
        w = (c - np.einsum("ij,ij->i", c, h)[:, None] * h) / np.where(hn > 0, hn, 1.0)[:, None]
        gbar = 0.5 * np.cross(-face_normals, w)
        np.add.at(cot, pairs[:, 0], dt[:, None] * (gL + gbar))
        np.add.at(cot, pairs[:, 1], dt[:, None] * (gR + gbar))
    return float(vals.sum()), cot, int((~keep).sum())


def loss_harmonic_s(pairs, volumes, s):
    w = 0.5 * (volumes[pairs[:, 0]] + volumes[pairs[:, 1]])
    diff = s[pairs[:, 0]] - s[pairs[:, 1]]
    val = float(np.sum(w * np.einsum("ij,ij->i", diff, diff)))
    g = 2 * w[:, None] * diff
    cot = np.zeros_like(s)
    np.add.at(cot, pairs[:, 0], g)
    np.add.at(cot, pairs[:, 1], -g)
    return val, cot


def loss_harmonic_q(pairs, volumes, q):
    """Sum of weighted (1 - qi . qj)^2 on normalized quaternions (not antipodally invariant)."""
    norm = np.linalg.norm(q, axis=1)
    qh = q / norm[:, None]
    w = 0.5 * (volumes[pairs[:, 0]] + volumes[pairs[:, 1]])
    qi, qj = qh[pairs[:, 0]], qh[pairs[:, 1]]
    gap = 1.0 - np.einsum("ij,ij->i", qi, qj)
    val = float(np.sum(w * gap**2))
    gh = np.zeros_like(q)
    coef = (-2.0 * w * gap)[:, None]
    np.add.at(gh, pairs[:, 0], coef * qj)
    np.add.at(gh, pairs[:, 1], coef * qi)
    cot = (gh - np.einsum("ij,ij->i", gh, qh)[:, None] * qh) / norm[:, None]
    return val, cot


def total_loss(b: LossBreakdown, w: LossWeights) -> float:
    """Weighted objective; L_CA stays outside as the hard constraint."""
    vals = (b.sf, b.sr, b.po, b.hs, b.hq)
    if not all(np.isfinite(vals)):
        raise FloatingPointError(f"non-finite loss term: {b.as_row()}")
    b.total = w.sf * b.sf + w.sr * b.sr + w.po * b.po + w.hs * b.hs + w.hq * b.hq
    return b.total

"""Layer extraction from the optimized field: iso-value selection, marching tetrahedra, trimming, export."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .deformation import element_gradients
from .implicit import mesh_area
from .meshio import write_obj

logger = logging.getLogger(__name__)


class InfeasiblePlanError(ValueError):
    def __init__(self, msg, elements=()):
        super().__init__(msg)
        self.elements = np.asarray(elements, int)


@dataclass
class SlicePlan:
    iso_values: np.ndarray
    t_min_est: float
    t_max_est: float
    elements: np.ndarray = field(repr=False, default=None)  # elements meeting the solid


@dataclass
class Layer:
    vertices: np.ndarray
    faces: np.ndarray
    iso_value: float
    index: int
    h_values: np.ndarray = field(repr=False, default=None)

    @property
    def area(self) -> float:
        return mesh_area(self.vertices, self.faces) if len(self.faces) else 0.0


# -- iso-value selection --------------------------------------------------------


def solid_elements(cage, solid) -> np.ndarray:
    """Elements whose corners or centre touch H <= 0 (conservative at cage resolution)."""
    hv = solid.h(cage.vertices)
    hc = solid.h(cage.centers)
    return np.flatnonzero((hv[cage.tets].min(axis=1) <= 0) | (hc <= 0))


def pick_isovalues(cage, xi, solid, t_min: float = 0.4, t_max: float = 1.0) -> SlicePlan:
    """Greedy slab stacking in G so no element meeting the solid gets thicker than t_max.

    Within a slab [b, b + dg] the geometric thickness in element e is
    dg / |grad G_e|; dg is shrunk to t_max times the smallest gradient norm
    among elements whose G-range overlaps the slab. Layers sit at slab
    midpoints, in ascending G.
    """
    if not 0 < t_min <= t_max:
        raise ValueError("need 0 < t_min <= t_max")
    g = np.asarray(xi)[:, 2]
    elems = solid_elements(cage, solid)
    if not len(elems):
        raise InfeasiblePlanError("solid does not meet the cage")
    grad = np.linalg.norm(element_gradients(cage, g)[elems], axis=1)
    ge = g[cage.tets[elems]]
    lo_e, hi_e = ge.min(axis=1), ge.max(axis=1)
    g_lo, g_hi = lo_e.min(), hi_e.max()
    scale = max(abs(g_lo), abs(g_hi), 1.0)
    flat = grad <= 1e-12 * scale
    if g_hi - g_lo <= 1e-12 * scale or flat.all():
        raise InfeasiblePlanError("field is constant over the solid", elems)
    isos, t_lo, t_hi = [], np.inf, 0.0
    b = g_lo
    while b < g_hi:
        dg = t_max * grad.max()
        while True:
            sel = (hi_e >= b) & (lo_e <= b + dg)
            if not sel.any():
                break
            if (flat & sel).any():
                bad = elems[flat & sel]
                raise InfeasiblePlanError(f"vanishing field gradient in {len(bad)} elements", bad)
            need = t_max * grad[sel].min()
            if need >= dg * (1 - 1e-12):
                break
            dg = need
        sel = (hi_e >= b) & (lo_e <= b + dg)
        if sel.any():
            thin = dg / grad[sel]
            if thin.min() < t_min * (1 - 1e-9):
                bad = elems[sel][thin < t_min * (1 - 1e-9)]
                raise InfeasiblePlanError(
                    f"thickness band [{t_min}, {t_max}] infeasible near G = {b:.4g}: "
                    f"min thickness {thin.min():.3g}", bad)
            t_lo, t_hi = min(t_lo, thin.min()), max(t_hi, thin.max())
        isos.append(b + 0.5 * dg)
        b += dg
    return SlicePlan(np.array(isos), float(t_lo), float(t_hi), elems)


# -- marching tetrahedra ----------------------------------------------------------

_TET_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])


def _nudge(values, iso):
    rng = float(values.max() - values.min()) or 1.0
    eps = 1e-12 * rng
    for _ in range(8):
        if not (np.abs(values - iso) <= 0.5 * eps).any():
            break
        iso += eps
    return iso


def extract_isosurface(cage, values, iso: float, vertices=None):
    """Marching tetrahedra on per-vertex ``values`` at level ``iso``.

    Crossing points are computed once per cage edge from the edge's sorted
    endpoints, so neighbouring tets share (weld) them exactly. Triangles are
    oriented towards increasing values. Returns (vertices, faces, iso_used).
    """
    verts = cage.vertices if vertices is None else np.asarray(vertices, float)
    values = np.asarray(values, float)
    iso = _nudge(values, float(iso))
    pos = values > iso
    tets = cage.tets
    npos = pos[tets].sum(axis=1)
    cut = np.flatnonzero((npos > 0) & (npos < 4))
    if not len(cut):
        return np.zeros((0, 3)), np.zeros((0, 3), np.int64), iso
    t = tets[cut]
    # crossing edges per tet and their global keys
    a, b = t[:, _TET_EDGES[:, 0]], t[:, _TET_EDGES[:, 1]]
    crosses = pos[a] != pos[b]
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    keys = lo.astype(np.int64) * len(verts) + hi
    ukeys, inv = np.unique(keys[crosses], return_inverse=True)
    ea, eb = ukeys // len(verts), ukeys % len(verts)
    s = (iso - values[ea]) / (values[eb] - values[ea])
    out_v = verts[ea] + s[:, None] * (verts[eb] - verts[ea])
    edge_vid = np.full(crosses.shape, -1)
    edge_vid[crosses] = inv

    grads = element_gradients(type(cage)(verts, cage.tets) if vertices is not None else cage, values)[cut]
    faces = []
    owner = []
    for row in range(len(cut)):
        p = pos[t[row]]
        ids = edge_vid[row]
        k = int(p.sum())
        if k in (1, 3):
            tri = ids[ids >= 0]
            faces.append(tri)
            owner.append(row)
        else:
            # quad: order the four crossing edges cyclically (each pair of
            # consecutive edges shares a tet vertex)
            e_idx = np.flatnonzero(ids >= 0)
            ring = [e_idx[0]]
            rest = list(e_idx[1:])
            while rest:
                last = set(_TET_EDGES[ring[-1]])
                nxt = next(e for e in rest if last & set(_TET_EDGES[e]))
                ring.append(nxt)
                rest.remove(nxt)
            q = ids[ring]
            faces.extend([q[[0, 1, 2]], q[[0, 2, 3]]])
            owner.extend([row, row])
    faces = np.array(faces, np.int64)
    owner = np.array(owner)
    tri = out_v[faces]
    nrm = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", nrm, grads[owner]) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return out_v, faces, iso


def clip_tet_plane(corners, values, iso):
    """Brute-force oracle: convex polygon of {value = iso} inside one tet, or None."""
    pts = []
    for i, j in _TET_EDGES:
        vi, vj = values[i] - iso, values[j] - iso
        if (vi > 0) != (vj > 0):
            s = vi / (vi - vj)
            pts.append(corners[i] + s * (corners[j] - corners[i]))
    if len(pts) < 3:
        return None
    pts = np.array(pts)
    c = pts.mean(axis=0)
    n = np.cross(pts[1] - pts[0], pts[2] - pts[0])
    u = pts[0] - c
    u /= np.linalg.norm(u)
    w = np.cross(n / np.linalg.norm(n), u)
    ang = np.arctan2((pts - c) @ w, (pts - c) @ u)
    return pts[np.argsort(ang)]


# -- trimming ------------------------------------------------------------------------


def _edge_root(solid, pa, pb, ha, hb, tol, max_iter=60):
    """Point on each segment near H = 0, always taken on the inside (H <= 0) end of the bracket.

    ``pa`` are inside (ha <= 0), ``pb`` outside (hb > 0). Illinois false
    position, terminated when the inside end satisfies |H| <= tol or the
    bracket collapses.
    """
    a, b = np.zeros(len(pa)), np.ones(len(pa))
    fa, fb = ha.copy(), hb.copy()
    side = np.zeros(len(pa), int)
    seg = pb - pa
    span = np.linalg.norm(seg, axis=1)
    for _ in range(max_iter):
        active = (np.abs(fa) > tol) & ((b - a) * span > 1e-3 * tol)
        if not active.any():
            break
        idx = np.flatnonzero(active)
        c = (a[idx] * fb[idx] - b[idx] * fa[idx]) / (fb[idx] - fa[idx])
        c = np.clip(c, a[idx] + 1e-3 * (b[idx] - a[idx]), b[idx] - 1e-3 * (b[idx] - a[idx]))
        fc = solid.h(pa[idx] + c[:, None] * seg[idx])
        ins = fc <= 0
        ii, oo = idx[ins], idx[~ins]
        a[ii], fa[ii] = c[ins], fc[ins]
        fb[ii[side[ii] == -1]] *= 0.5
        side[ii] = -1
        b[oo], fb[oo] = c[~ins], fc[~ins]
        fa[oo[side[oo] == 1]] *= 0.5
        side[oo] = 1
    x = pa + a[:, None] * seg
    return x, solid.h(x)


def trim_layer(vertices, faces, solid, iso_value=0.0, index=0, eps=None) -> Layer:
    """Clip a layer mesh to H <= 0.

    Triangles whose edge midpoints disagree in sign with both endpoints are
    split once into four before clipping. Crossing points are found by a
    bracketed root solve along each edge and kept on the inside, so every
    retained vertex satisfies H <= eps (default 1e-6 x bbox diagonal).
    """
    V = np.asarray(vertices, float)
    F = np.asarray(faces, np.int64)
    eps = 1e-6 * solid.diagonal if eps is None else eps
    if not len(F):
        return Layer(np.zeros((0, 3)), np.zeros((0, 3), np.int64), iso_value, index, np.zeros(0))
    H = solid.h(V)

    # one level of refinement where a midpoint has the opposite sign of two agreeing endpoints
    e = np.stack([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]], 1).reshape(-1, 2)
    ek = np.sort(e, axis=1)
    ukey, einv = np.unique(ek, axis=0, return_inverse=True)
    einv = einv.ravel().reshape(-1, 3)
    mid = 0.5 * (V[ukey[:, 0]] + V[ukey[:, 1]])
    ins_a, ins_b = H[ukey[:, 0]] <= 0, H[ukey[:, 1]] <= 0
    same = ins_a == ins_b
    hm = np.full(len(ukey), np.nan)
    hm[same] = solid.h(mid[same])
    odd_edge = same & ((hm <= 0) != ins_a)
    refine = odd_edge[einv].any(axis=1)
    if refine.any():
        need = np.unique(einv[refine])
        if np.isnan(hm[need]).any():
            miss = need[np.isnan(hm[need])]
            hm[miss] = solid.h(mid[miss])
        mid_id = np.full(len(ukey), -1)
        mid_id[need] = len(V) + np.arange(len(need))
        V = np.vstack([V, mid[need]])
        H = np.concatenate([H, hm[need]])
        sub = []
        for f, m in zip(F[refine], mid_id[einv[refine]]):
            a, b, c = f
            ab, bc, ca = m
            sub.extend([(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)])
        F = np.vstack([F[~refine], np.array(sub, np.int64)]) if (~refine).any() else np.array(sub, np.int64)
        # keep original triangle order stable: refined children go where the parent was
        order = np.concatenate([np.flatnonzero(~refine), np.repeat(np.flatnonzero(refine), 4)])
        F = F[np.argsort(order, kind="stable")]

    inside = H <= 0
    cnt = inside[F].sum(axis=1)
    keep_whole = cnt == 3
    mixed = np.flatnonzero((cnt > 0) & (cnt < 3))

    # crossing points per unique mixed edge
    cross = {}
    if len(mixed):
        pairs = []
        for f in F[mixed]:
            for i, j in ((0, 1), (1, 2), (2, 0)):
                if inside[f[i]] != inside[f[j]]:
                    pairs.append((min(f[i], f[j]), max(f[i], f[j])))
        pairs = np.unique(np.array(pairs, np.int64), axis=0)
        a_in = inside[pairs[:, 0]]
        pin = np.where(a_in, pairs[:, 0], pairs[:, 1])
        pout = np.where(a_in, pairs[:, 1], pairs[:, 0])
        x, hx = _edge_root(solid, V[pin], V[pout], H[pin], H[pout], eps)
        base = len(V)
        V = np.vstack([V, x])
        H = np.concatenate([H, hx])
        for k, (i, j) in enumerate(pairs):
            cross[(int(i), int(j))] = base + k

    out = []
    for fi in range(len(F)):
        f = F[fi]
        if keep_whole[fi]:
            out.append(f)
            continue
        if cnt[fi] == 0:
            continue
        poly = []
        for i in range(3):
            a, b = int(f[i]), int(f[(i + 1) % 3])
            if inside[a]:
                poly.append(a)
            if inside[a] != inside[b]:
                poly.append(cross[(min(a, b), max(a, b))])
        for k in range(1, len(poly) - 1):
            out.append((poly[0], poly[k], poly[k + 1]))
    if not out:
        return Layer(np.zeros((0, 3)), np.zeros((0, 3), np.int64), iso_value, index, np.zeros(0))
    out = np.array(out, np.int64)
    used = np.zeros(len(V), bool)
    used[out.ravel()] = True
    remap = np.cumsum(used) - 1
    return Layer(V[used], remap[out], iso_value, index, H[used])


def slice_field(cage, xi, solid, plan: SlicePlan):
    """Extract and trim one layer per iso-value, in printing order."""
    g = np.asarray(xi)[:, 2]
    layers = []
    for i, iso in enumerate(plan.iso_values):
        v, f, used = extract_isosurface(cage, g, iso)
        layers.append(trim_layer(v, f, solid, used, i))
    return layers


def export_layers(layers, out_dir, plan: SlicePlan | None = None) -> dict:
    """One OBJ per layer (zero-padded printing index) plus manifest.json."""
    if not layers:
        raise ValueError("no layers to export")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(len(layers) - 1)))
    entries = []
    for layer in layers:
        name = f"{layer.index:0{width}d}.obj"
        write_obj(out / name, layer.vertices, layer.faces)
        entries.append({"index": layer.index, "file": name, "iso_value": float(layer.iso_value),
                        "area": float(layer.area), "n_vertices": int(len(layer.vertices)),
                        "n_faces": int(len(layer.faces))})
    manifest = {"layers": entries, "count": len(layers)}
    if plan is not None:
        manifest["thickness"] = {"min": plan.t_min_est, "max": plan.t_max_est}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


# -- quality histograms --------------------------------------------------------------


@dataclass
class HistogramReport:
    sf_counts: np.ndarray
    sf_weights: np.ndarray
    sr_counts: np.ndarray
    sr_weights: np.ndarray
    sf_violating: float
    sr_violating: float
    n_sf: int
    n_sr: int

    def summary(self) -> dict:
        return {"sf_violating_fraction": self.sf_violating, "sr_violating_fraction": self.sr_violating,
                "sf_samples": self.n_sf, "sr_samples": self.n_sr}


def report_histograms(B, T, dB, dT, alpha_deg: float = 45.0, beta_deg: float = 10.0,
                      b_valid=None, t_valid=None) -> HistogramReport:
    """1-degree histograms of angle(-n, d) over active B and angle(d, +-tau) over T.

    A boundary sample violates when -n.d > sin(alpha) (angle below 90 - alpha);
    a stress sample violates when |d.tau| > sin(beta) (angle below 90 - beta).
    """
    bins = np.arange(181)
    act = B.active.copy()
    if b_valid is not None:
        act &= b_valid
    c = np.clip(-np.einsum("ij,ij->i", B.normals[act], dB[act]), -1, 1)
    ang = np.degrees(np.arccos(c))
    sf_counts, _ = np.histogram(ang, bins)
    sf_w, _ = np.histogram(ang, bins, weights=B.areas[act])
    sf_v = float((c > np.sin(np.radians(alpha_deg))).mean()) if act.any() else 0.0

    tv = np.ones(len(T), bool) if t_valid is None else t_valid
    ct = np.clip(np.abs(np.einsum("ij,ij->i", T.tau[tv], dT[tv])), 0, 1) if len(T) else np.zeros(0)
    angt = np.degrees(np.arccos(ct))
    sr_counts, _ = np.histogram(angt, bins)
    sr_w, _ = np.histogram(angt, bins, weights=T.volumes[tv] if len(T) else None)
    sr_v = float((ct > np.sin(np.radians(beta_deg))).mean()) if len(ct) else 0.0
    return HistogramReport(sf_counts, sf_w, sr_counts, sr_w, sf_v, sr_v, int(act.sum()), int(len(ct)))


def histogram_csv(counts, weights) -> str:
    lines = ["bin_start_deg,count,weight_sum"]
    lines += [f"{i},{int(c)},{float(w)!r}" for i, (c, w) in enumerate(zip(counts, weights))]
    return "\n".join(lines) + "\n"

"""Implicit solids: H(x) < 0 inside, > 0 outside, distance-like near the boundary.

Supported primitives are closed triangle meshes (signed by generalized winding
number), capsules, hollow finite tubes and offset shells around open meshes.
They combine through union (min), intersection (max) and complement (negation).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .meshio import read_obj

logger = logging.getLogger(__name__)

DEGENERATE_GRAD = 1e-8
_CHUNK = 1 << 21  # point-triangle pairs evaluated per batch


class SolidSpecError(ValueError):
    """Raised for malformed solid descriptions or invalid primitives."""


# ---------------------------------------------------------------------------
# geometric kernels


def closest_on_segments(x, a, b):
    """Closest points on segments a-b to points x (broadcasting over leading axes)."""
    ab = b - a
    denom = np.einsum("...i,...i->...", ab, ab)
    t = np.einsum("...i,...i->...", x - a, ab) / np.where(denom > 0, denom, 1.0)
    t = np.clip(np.where(denom > 0, t, 0.0), 0.0, 1.0)
    return a + t[..., None] * ab


def closest_on_triangles(x, tri):
    """Closest points on triangles to points.

    x has shape (n, 1, 3) and tri (1, m, 3, 3); returns (n, m, 3).
    Inside the prism over the triangle the plane projection wins, otherwise
    the nearest of the three edge projections.
    """
    v0, v1, v2 = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    e0, e1 = v1 - v0, v2 - v0
    nrm = np.cross(e0, e1)
    nn = np.einsum("...i,...i->...", nrm, nrm)
    nn_safe = np.where(nn > 0, nn, 1.0)
    w = x - v0
    # barycentric of the plane projection
    b1 = np.einsum("...i,...i->...", np.cross(w, e1), nrm) / nn_safe
    b2 = np.einsum("...i,...i->...", np.cross(e0, w), nrm) / nn_safe
    inside = (b1 >= 0) & (b2 >= 0) & (b1 + b2 <= 1) & (nn > 0)
    proj = x - (np.einsum("...i,...i->...", w, nrm) / nn_safe)[..., None] * nrm
    best = None
    best_d = None
    for a, b in ((v0, v1), (v1, v2), (v2, v0)):
        c = closest_on_segments(x, a, b)
        d = np.einsum("...i,...i->...", x - c, x - c)
        if best is None:
            best, best_d = c, d
        else:
            take = d < best_d
            best = np.where(take[..., None], c, best)
            best_d = np.where(take, d, best_d)
    return np.where(inside[..., None], proj, best)


def mesh_unsigned_distance(points, vertices, faces):
    """Unsigned distance and closest point from each point to a triangle mesh (brute force)."""
    points = np.atleast_2d(points)
    tri = vertices[faces]
    n, m = len(points), len(tri)
    dist = np.empty(n)
    closest = np.empty((n, 3))
    step = max(1, _CHUNK // max(m, 1))
    for s in range(0, n, step):
        p = points[s : s + step, None, :]
        c = closest_on_triangles(p, tri[None])
        d2 = np.einsum("nmi,nmi->nm", p - c, p - c)
        j = np.argmin(d2, axis=1)
        rows = np.arange(len(j))
        dist[s : s + step] = np.sqrt(d2[rows, j])
        closest[s : s + step] = c[rows, j]
    return dist, closest


def winding_number(points, vertices, faces):
    """Generalized winding number via summed triangle solid angles."""
    points = np.atleast_2d(points)
    tri = vertices[faces]
    n, m = len(points), len(tri)
    out = np.empty(n)
    step = max(1, _CHUNK // max(m, 1))
    for s in range(0, n, step):
        p = points[s : s + step, None, :]
        a, b, c = tri[None, :, 0] - p, tri[None, :, 1] - p, tri[None, :, 2] - p
        la, lb, lc = (np.linalg.norm(v, axis=-1) for v in (a, b, c))
        num = np.einsum("...i,...i->...", a, np.cross(b, c))
        den = (
            la * lb * lc
            + np.einsum("...i,...i->...", a, b) * lc
            + np.einsum("...i,...i->...", b, c) * la
            + np.einsum("...i,...i->...", c, a) * lb
        )
        out[s : s + step] = (2.0 * np.arctan2(num, den)).sum(axis=1) / (4.0 * np.pi)
    return out


def check_closed_mesh(faces) -> bool:
    """Every directed edge must be matched by exactly one opposite edge."""
    faces = np.asarray(faces)
    if len(faces) == 0:
        return False
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    directed, counts = np.unique(e, axis=0, return_counts=True)
    if (counts != 1).any():
        return False
    fwd = {tuple(r) for r in directed.tolist()}
    return all((b, a) in fwd for a, b in fwd)


# ---------------------------------------------------------------------------
# CSG nodes


@dataclass(frozen=True)
class CsgNode:
    """Base node; subclasses implement ``_eval`` returning (H, grad or None)."""

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def _eval(self, x, want_grad):
        raise NotImplementedError


def _offset_gradient(x, closest, dist):
    g = (x - closest) / np.where(dist > 0, dist, 1.0)[:, None]
    g[dist <= 0] = 0.0
    return g


@dataclass(frozen=True, eq=False)
class MeshSdf(CsgNode):
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        if not check_closed_mesh(self.faces):
            raise SolidSpecError("MeshSdf requires a closed, consistently oriented triangle mesh")

    def bbox(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def _eval(self, x, want_grad):
        d, _ = mesh_unsigned_distance(x, self.vertices, self.faces)
        inside = winding_number(x, self.vertices, self.faces) >= 0.5
        return np.where(inside, -d, d), None


@dataclass(frozen=True, eq=False)
class Capsule(CsgNode):
    p0: np.ndarray
    p1: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "p0", _vec(self.p0, "p0"))
        object.__setattr__(self, "p1", _vec(self.p1, "p1"))
        if not self.radius > 0:
            raise SolidSpecError(f"capsule radius must be positive, got {self.radius}")

    def bbox(self):
        lo = np.minimum(self.p0, self.p1) - self.radius
        hi = np.maximum(self.p0, self.p1) + self.radius
        return lo, hi

    def _eval(self, x, want_grad):
        c = closest_on_segments(x, self.p0, self.p1)
        d = np.linalg.norm(x - c, axis=1)
        return d - self.radius, _offset_gradient(x, c, d) if want_grad else None


@dataclass(frozen=True, eq=False)
class Tube(CsgNode):
    """Hollow finite cylinder around segment p0-p1 with open flat ends."""

    p0: np.ndarray
    p1: np.ndarray
    outer_radius: float
    thickness: float

    def __post_init__(self):
        object.__setattr__(self, "p0", _vec(self.p0, "p0"))
        object.__setattr__(self, "p1", _vec(self.p1, "p1"))
        if not (self.outer_radius > 0 and self.thickness > 0):
            raise SolidSpecError("tube radius and wall thickness must be positive")
        if self.thickness > self.outer_radius:
            raise SolidSpecError("tube wall thicker than its radius")
        if np.linalg.norm(self.p1 - self.p0) <= 0:
            raise SolidSpecError("tube segment has zero length")

    def bbox(self):
        r = self.outer_radius
        return np.minimum(self.p0, self.p1) - r, np.maximum(self.p0, self.p1) + r

    def _eval(self, x, want_grad):
        axis = self.p1 - self.p0
        length = np.linalg.norm(axis)
        u = axis / length
        rel = x - self.p0
        t = rel @ u
        radial = rel - t[:, None] * u
        rho = np.linalg.norm(radial, axis=1)
        # box SDF in the (rho, t) half-plane
        half_w = 0.5 * self.thickness
        q = np.stack([np.abs(rho - (self.outer_radius - half_w)) - half_w, np.abs(t - 0.5 * length) - 0.5 * length], 1)
        qpos = np.maximum(q, 0.0)
        outside = np.linalg.norm(qpos, axis=1)
        h = outside + np.minimum(q.max(axis=1), 0.0)
        if not want_grad:
            return h, None
        g2 = np.zeros_like(q)
        out = outside > 0
        g2[out] = qpos[out] / outside[out, None]
        ins = ~out
        k = np.argmax(q[ins], axis=1)
        g2[np.flatnonzero(ins), k] = 1.0
        g2[:, 0] *= np.sign(rho - (self.outer_radius - half_w))
        g2[:, 1] *= np.sign(t - 0.5 * length)
        e_rho = radial / np.where(rho > 0, rho, 1.0)[:, None]
        grad = g2[:, :1] * e_rho + g2[:, 1:] * u
        return h, grad


@dataclass(frozen=True, eq=False)
class Shell(CsgNode):
    """Offset solid |udf(kernel)| - t around a possibly open triangle mesh."""

    vertices: np.ndarray
    faces: np.ndarray
    half_thickness: float

    def __post_init__(self):
        if not self.half_thickness > 0:
            raise SolidSpecError("shell half-thickness must be positive")

    def bbox(self):
        t = self.half_thickness
        return self.vertices.min(axis=0) - t, self.vertices.max(axis=0) + t

    def _eval(self, x, want_grad):
        d, c = mesh_unsigned_distance(x, self.vertices, self.faces)
        return d - self.half_thickness, _offset_gradient(x, c, d) if want_grad else None


@dataclass(frozen=True, eq=False)
class Union(CsgNode):
    children: tuple

    def bbox(self):
        boxes = [c.bbox() for c in self.children]
        return np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0)

    def _eval(self, x, want_grad):
        return _select(self.children, x, want_grad, np.argmin)


@dataclass(frozen=True, eq=False)
class Intersection(CsgNode):
    children: tuple

    def bbox(self):
        boxes = [c.bbox() for c in self.children]
        lo, hi = np.max([b[0] for b in boxes], axis=0), np.min([b[1] for b in boxes], axis=0)
        return lo, np.maximum(lo, hi)

    def _eval(self, x, want_grad):
        return _select(self.children, x, want_grad, np.argmax)


@dataclass(frozen=True, eq=False)
class Complement(CsgNode):
    child: CsgNode

    def bbox(self):
        # unbounded; only meaningful inside an intersection
        return self.child.bbox()

    def _eval(self, x, want_grad):
        h, g = self.child._eval(x, want_grad)
        return -h, (None if g is None else -g)


def _select(children, x, want_grad, pick):
    results = [c._eval(x, want_grad) for c in children]
    hs = np.stack([r[0] for r in results])
    k = pick(hs, axis=0)
    cols = np.arange(hs.shape[1])
    h = hs[k, cols]
    if not want_grad or any(r[1] is None for r in results):
        return h, None
    gs = np.stack([r[1] for r in results])
    return h, gs[k, cols]


# ---------------------------------------------------------------------------
# solid


@dataclass(frozen=True, eq=False)
class ImplicitSolid:
    root: CsgNode
    bbox_lo: np.ndarray = field(default=None)
    bbox_hi: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.bbox_lo is None or self.bbox_hi is None:
            lo, hi = self.root.bbox()
            object.__setattr__(self, "bbox_lo", np.asarray(lo, float))
            object.__setattr__(self, "bbox_hi", np.asarray(hi, float))

    @property
    def bbox(self):
        return self.bbox_lo, self.bbox_hi

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.bbox_hi - self.bbox_lo))

    def h(self, points) -> np.ndarray:
        x = np.atleast_2d(np.asarray(points, float))
        h, _ = self.root._eval(x, False)
        d = self.diagonal
        return np.clip(h, -d, d)

    def grad(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Gradient of H and a validity mask (False on medial/degenerate points)."""
        x = np.atleast_2d(np.asarray(points, float))
        _, g = self.root._eval(x, True)
        if g is None:
            step = 1e-4 * self.diagonal
            g = np.empty_like(x)
            for k in range(3):
                e = np.zeros(3)
                e[k] = step
                hp, _ = self.root._eval(x + e, False)
                hm, _ = self.root._eval(x - e, False)
                g[:, k] = (hp - hm) / (2 * step)
        ok = np.linalg.norm(g, axis=1) >= DEGENERATE_GRAD
        return g, ok


def eval_h(solid: ImplicitSolid, x) -> np.ndarray | float:
    """H at a point (scalar) or an (n, 3) batch."""
    x = np.asarray(x, float)
    h = solid.h(x)
    return float(h[0]) if x.ndim == 1 else h


def grad_h(solid: ImplicitSolid, x):
    """Gradient of H; returns (grad, ok) where ok flags non-degenerate lanes."""
    x = np.asarray(x, float)
    g, ok = solid.grad(x)
    return (g[0], bool(ok[0])) if x.ndim == 1 else (g, ok)


# ---------------------------------------------------------------------------
# solid description documents


def _vec(v, name):
    a = np.asarray(v, float)
    if a.shape != (3,) or not np.isfinite(a).all():
        raise SolidSpecError(f"{name} must be a finite 3-vector")
    return a


def _load_mesh(prim, base):
    path = Path(prim["file"])
    if not path.is_absolute():
        path = base / path
    if not path.exists():
        raise SolidSpecError(f"geometry file not found: {path}")
    return read_obj(path)


def _build_primitive(prim, base):
    kind = prim.get("kind")
    if kind == "mesh":
        v, f = _load_mesh(prim, base)
        return MeshSdf(v, f)
    if kind == "capsule":
        return Capsule(_vec(prim["p0"], "p0"), _vec(prim["p1"], "p1"), float(prim["radius"]))
    if kind == "sphere":
        c = _vec(prim["center"], "center")
        return Capsule(c, c.copy(), float(prim["radius"]))
    if kind == "tube":
        return Tube(_vec(prim["p0"], "p0"), _vec(prim["p1"], "p1"), float(prim["radius"]), float(prim["thickness"]))
    if kind == "shell":
        v, f = _load_mesh(prim, base)
        return Shell(v, f, float(prim["thickness"]))
    raise SolidSpecError(f"unknown primitive kind {kind!r}")


def _build_tree(expr, prims):
    if isinstance(expr, str):
        if expr not in prims:
            raise SolidSpecError(f"csg references unknown primitive {expr!r}")
        return prims[expr]
    if not isinstance(expr, dict) or len(expr) != 1:
        raise SolidSpecError(f"bad csg expression {expr!r}")
    (op, arg), = expr.items()
    if op == "complement":
        return Complement(_build_tree(arg, prims))
    if op not in ("union", "intersection") or not isinstance(arg, list) or not arg:
        raise SolidSpecError(f"bad csg operator {op!r}")
    kids = tuple(_build_tree(a, prims) for a in arg)
    if len(kids) == 1:
        return kids[0]
    return Union(kids) if op == "union" else Intersection(kids)


def build_solid(spec, base_dir=None) -> ImplicitSolid:
    """Build a solid from a description document (dict, JSON string or path).

    ``primitives`` is a list of objects with an ``id`` and ``kind`` among
    ``mesh`` (closed OBJ, ``file``), ``shell`` (OBJ ``file``, half-``thickness``),
    ``capsule`` (``p0``, ``p1``, ``radius``), ``sphere`` (``center``, ``radius``)
    and ``tube`` (``p0``, ``p1``, outer ``radius``, wall ``thickness``).
    ``csg`` is a primitive id or a nested ``{"union"|"intersection": [...]}`` /
    ``{"complement": expr}`` tree; it defaults to the union of all primitives.
    """
    if isinstance(spec, (str, Path)) and Path(spec).exists():
        base_dir = Path(spec).parent if base_dir is None else base_dir
        spec = json.loads(Path(spec).read_text())
    elif isinstance(spec, str):
        spec = json.loads(spec)
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    try:
        prims = {}
        for i, p in enumerate(spec["primitives"]):
            prims[str(p.get("id", i))] = _build_primitive(p, base)
    except (KeyError, TypeError) as exc:
        raise SolidSpecError(f"malformed primitive: {exc}") from exc
    if not prims:
        raise SolidSpecError("solid has no primitives")
    expr = spec.get("csg", {"union": list(prims)})
    root = _build_tree(expr, prims)
    if isinstance(root, Complement):
        raise SolidSpecError("a bare complement is unbounded")
    return ImplicitSolid(root)


def solid_from_nodes(*nodes: CsgNode) -> ImplicitSolid:
    return ImplicitSolid(nodes[0] if len(nodes) == 1 else Union(tuple(nodes)))


# ---------------------------------------------------------------------------
# zero surface


def sample_grid(solid: ImplicitSolid, resolution: int, pad_cells: int = 2):
    """H on a cubic-cell grid covering the bbox; returns (values, origin, spacing)."""
    lo, hi = solid.bbox
    spacing = float((hi - lo).max()) / resolution
    origin = lo - pad_cells * spacing
    dims = np.ceil((hi - lo) / spacing).astype(int) + 2 * pad_cells + 1
    axes = [origin[k] + spacing * np.arange(dims[k]) for k in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    return solid.h(pts).reshape(dims), origin, spacing


def extract_zero_surface(solid: ImplicitSolid, resolution: int = 64):
    """Marching-cubes mesh of H = 0; returns (vertices, faces), empty arrays if nothing crosses."""
    from skimage.measure import marching_cubes

    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    values, origin, spacing = sample_grid(solid, resolution)
    if not (values.min() < 0 < values.max()):
        logger.warning("zero surface is empty at resolution %d", resolution)
        return np.zeros((0, 3)), np.zeros((0, 3), np.int64)
    verts, faces, _, _ = marching_cubes(values, level=0.0, spacing=(spacing,) * 3)
    # skimage winds faces so normals point toward increasing H, i.e. outward
    return verts.astype(float) + origin, faces.astype(np.int64)


def mesh_area(vertices, faces) -> float:
    if len(faces) == 0:
        return 0.0
    t = vertices[faces]
    return float(0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1).sum())

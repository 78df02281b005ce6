"""Closed triangle meshes for standard test shapes (outward-oriented)."""

from __future__ import annotations

import numpy as np


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], float)
    v = lo + corners * (hi - lo)
    # vertex index = 4*i + 2*j + k
    quads = [
        (0, 1, 3, 2),  # x = lo
        (4, 6, 7, 5),  # x = hi
        (0, 4, 5, 1),  # y = lo
        (2, 3, 7, 6),  # y = hi
        (0, 2, 6, 4),  # z = lo
        (1, 5, 7, 3),  # z = hi
    ]
    f = []
    for a, b, c, d in quads:
        f += [(a, b, c), (a, c, d)]
    return v, np.asarray(f, np.int64)


def prism_mesh(profile, depth):
    """Extrude a counter-clockwise (x, z) polygon along +y by ``depth``."""
    p = np.asarray(profile, float)
    n = len(p)
    front = np.column_stack([p[:, 0], np.zeros(n), p[:, 1]])
    back = front + [0.0, depth, 0.0]
    v = np.vstack([front, back])
    f = []
    # CCW in the xz-plane viewed from -y means the front cap normal is -y
    for k in range(1, n - 1):
        f.append((0, k, k + 1))
        f.append((n, n + k + 1, n + k))
    for k in range(n):
        a, b = k, (k + 1) % n
        f += [(a, n + a, n + b), (a, n + b, b)]
    return v, np.asarray(f, np.int64)


def wedge_mesh(base=4.0, reach=16.0, height=10.0, depth=20.0):
    """Triangular prism whose right face overhangs: profile (0,0), (base,0), (reach,height)."""
    return prism_mesh([(0.0, 0.0), (base, 0.0), (reach, height)], depth)


def icosphere(subdivisions=3, radius=1.0, center=(0.0, 0.0, 0.0)):
    t = (1.0 + 5**0.5) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.asarray(p, float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nf
    return np.asarray(verts) * radius + np.asarray(center, float), np.asarray(faces, np.int64)


def torus_mesh(major=1.0, minor=0.35, n_major=32, n_minor=16):
    u = 2 * np.pi * np.arange(n_major) / n_major
    w = 2 * np.pi * np.arange(n_minor) / n_minor
    uu, ww = np.meshgrid(u, w, indexing="ij")
    r = major + minor * np.cos(ww)
    v = np.stack([r * np.cos(uu), r * np.sin(uu), minor * np.sin(ww)], -1).reshape(-1, 3)
    f = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            d = i * n_minor + (j + 1) % n_minor
            f += [(a, b, c), (a, c, d)]
    return v, np.asarray(f, np.int64)


def signed_volume(vertices, faces) -> float:
    t = vertices[faces]
    return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

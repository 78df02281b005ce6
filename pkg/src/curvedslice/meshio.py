"""Plain-text mesh formats: OBJ triangle meshes, ``v``/``t`` tet meshes, .node/.ele pairs."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class MeshFormatError(ValueError):
    pass


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Read vertices and triangular faces from an ASCII OBJ file.

    Polygonal faces are fan-triangulated. Texture/normal indices
    (``f 1/2/3``) are ignored; negative (relative) indices are resolved.
    """
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshFormatError(f"{path}:{lineno}: malformed vertex")
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for p in parts[1:]:
                    i = int(p.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise MeshFormatError(f"{path}:{lineno}: face with <3 vertices")
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    v = np.asarray(verts, dtype=float).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(f) and (f.min() < 0 or f.max() >= len(v)):
        raise MeshFormatError(f"{path}: face index out of range")
    return v, f


def write_obj(path, vertices, faces) -> None:
    # repr-exact floats keep re-exports byte-identical
    lines = [f"v {x!r} {y!r} {z!r}\n" for x, y, z in np.asarray(vertices, dtype=float).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in np.asarray(faces, dtype=np.int64).tolist()]
    Path(path).write_text("".join(lines))


def read_tet(path) -> tuple[np.ndarray, np.ndarray]:
    """Read the native tet-mesh format.

    The format is line based::

        # comment
        v <x> <y> <z>
        ...
        t <i0> <i1> <i2> <i3>
        ...

    Indices are zero-based into the ``v`` records in file order.
    """
    verts, tets = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(p) for p in parts[1:4]])
                elif parts[0] == "t":
                    tets.append([int(p) for p in parts[1:5]])
                else:
                    raise MeshFormatError(f"{path}:{lineno}: unknown record {parts[0]!r}")
            except (ValueError, IndexError) as exc:
                if isinstance(exc, MeshFormatError):
                    raise
                raise MeshFormatError(f"{path}:{lineno}: {exc}") from exc
            if parts[0] == "v" and len(verts[-1]) != 3 or parts[0] == "t" and len(tets[-1]) != 4:
                raise MeshFormatError(f"{path}:{lineno}: wrong number of fields")
    return np.asarray(verts, float).reshape(-1, 3), np.asarray(tets, np.int64).reshape(-1, 4)


def write_tet(path, vertices, tets) -> None:
    lines = ["# tet mesh: v x y z / t i0 i1 i2 i3 (zero-based)\n"]
    lines += [f"v {x!r} {y!r} {z!r}\n" for x, y, z in np.asarray(vertices, float).tolist()]
    lines += [f"t {a} {b} {c} {d}\n" for a, b, c, d in np.asarray(tets, np.int64).tolist()]
    Path(path).write_text("".join(lines))


def _data_lines(path):
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                yield line.split()


def read_node_ele(node_path, ele_path=None) -> tuple[np.ndarray, np.ndarray]:
    """Read a TetGen-style .node/.ele pair; index base is taken from the first node id."""
    node_path = Path(node_path)
    ele_path = Path(ele_path) if ele_path else node_path.with_suffix(".ele")
    rows = _data_lines(node_path)
    n = int(next(rows)[0])
    ids, verts = [], []
    for _ in range(n):
        r = next(rows)
        ids.append(int(r[0]))
        verts.append([float(c) for c in r[1:4]])
    base = min(ids) if ids else 0
    order = np.argsort(ids)
    verts = np.asarray(verts, float)[order]
    rows = _data_lines(ele_path)
    header = next(rows)
    m, per = int(header[0]), int(header[1])
    if per < 4:
        raise MeshFormatError(f"{ele_path}: elements with {per} nodes")
    tets = [[int(c) - base for c in next(rows)[1:5]] for _ in range(m)]
    return verts, np.asarray(tets, np.int64).reshape(-1, 4)


def read_scalar_field(path, n_expected=None) -> np.ndarray:
    """One float per line (``#`` comments allowed), or a ``.npy`` array."""
    path = Path(path)
    if path.suffix == ".npy":
        values = np.load(path).astype(float).ravel()
    else:
        values = np.asarray([float(r[0]) for r in _data_lines(path)], float)
    if n_expected is not None and len(values) != n_expected:
        raise MeshFormatError(f"{path}: {len(values)} values, expected {n_expected}")
    return values


def write_scalar_field(path, values) -> None:
    Path(path).write_text("".join(f"{v!r}\n" for v in np.asarray(values, float).tolist()))

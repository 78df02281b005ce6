"""Sinusoidal coordinate networks for the rotation (quaternion) and scale fields.

Forward and reverse passes are written out in numpy so gradients can be
checked against finite differences at double precision.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

QUATERNION = "quaternion"
SCALE = "scale"
_OUT_DIM = {QUATERNION: 4, SCALE: 3}
_MAGIC = b"CSFIELD1"
QUAT_EPS = 1e-8


class StaleCacheError(RuntimeError):
    pass


@dataclass(eq=False)
class FieldNetwork:
    head: str
    weights: list
    biases: list
    omega0: float = 30.0
    input_lo: np.ndarray = field(default_factory=lambda: -np.ones(3))
    input_hi: np.ndarray = field(default_factory=lambda: np.ones(3))
    s_min: float = 0.2
    s_max: float = 5.0
    version: int = 0

    @property
    def depth(self) -> int:
        return len(self.weights) - 1

    @property
    def width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return _OUT_DIM[self.head]

    def params(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, float)
        i = 0
        for p in self.params():
            p[...] = flat[i : i + p.size].reshape(p.shape)
            i += p.size
        self.touch()

    def touch(self) -> None:
        """Mark parameters as modified so older forward caches are rejected."""
        self.version += 1

    def normalize_input(self, x) -> np.ndarray:
        return 2.0 * (x - self.input_lo) / (self.input_hi - self.input_lo) - 1.0

    def copy(self) -> "FieldNetwork":
        return FieldNetwork(self.head, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                            self.omega0, self.input_lo.copy(), self.input_hi.copy(), self.s_min, self.s_max)


def param_count(depth: int, width: int, out_dim: int, in_dim: int = 3) -> int:
    return in_dim * width + width + (depth - 1) * (width * width + width) + width * out_dim + out_dim


def init_network(head: str, depth: int = 5, width: int = 64, seed: int = 0, omega0: float = 30.0,
                 bounds=None, s_min: float = 0.2, s_max: float = 5.0) -> FieldNetwork:
    """SIREN-initialized network whose output is the identity map (q = 1, s = 1).

    ``bounds`` is the (lo, hi) box mapped onto [-1, 1]^3 at the input.
    """
    if head not in _OUT_DIM:
        raise ValueError(f"unknown head {head!r}")
    if depth < 1 or width < 4:
        raise ValueError("need depth >= 1 and width >= 4")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    fan_in = 3
    for layer in range(depth):
        lim = 1.0 / fan_in if layer == 0 else np.sqrt(6.0 / fan_in) / omega0
        weights.append(rng.uniform(-lim, lim, (width, fan_in)))
        biases.append(rng.uniform(-1 / np.sqrt(fan_in), 1 / np.sqrt(fan_in), width))
        fan_in = width
    out = _OUT_DIM[head]
    weights.append(np.zeros((out, width)))
    biases.append(np.array([1.0, 0.0, 0.0, 0.0]) if head == QUATERNION else np.zeros(3))
    lo, hi = (np.array(b, float) for b in bounds) if bounds is not None else (-np.ones(3), np.ones(3))
    return FieldNetwork(head, weights, biases, omega0, lo, hi, s_min, s_max)


@dataclass(eq=False)
class FieldSample:
    raw: np.ndarray
    value: np.ndarray
    fallback: np.ndarray  # quaternion lanes replaced by identity
    active: np.ndarray  # scale lanes not clamped
    cache: list
    version: int
    net_id: int


def forward(net: FieldNetwork, points) -> FieldSample:
    x = net.normalize_input(np.atleast_2d(np.asarray(points, float)))
    cache = [x]
    h = x
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        z = net.omega0 * (h @ W.T + b)
        h = np.sin(z)
        cache.append(z)
        cache.append(h)
    raw = h @ net.weights[-1].T + net.biases[-1]
    n = len(raw)
    if net.head == QUATERNION:
        norm = np.linalg.norm(raw, axis=1)
        fallback = norm < QUAT_EPS
        value = raw / np.where(fallback, 1.0, norm)[:, None]
        value[fallback] = (1.0, 0.0, 0.0, 0.0)
        active = np.ones(n, bool)
    else:
        e = np.exp(raw)
        value = np.clip(e, net.s_min, net.s_max)
        active = (e > net.s_min) & (e < net.s_max)
        fallback = np.zeros(n, bool)
    return FieldSample(raw, value, fallback, active, cache, net.version, id(net))


def output_cotangent_to_raw(net: FieldNetwork, sample: FieldSample, cot) -> np.ndarray:
    if net.head == QUATERNION:
        q = sample.value
        norm = np.linalg.norm(sample.raw, axis=1)
        g = (cot - np.einsum("ij,ij->i", cot, q)[:, None] * q) / np.where(sample.fallback, 1.0, norm)[:, None]
        g[sample.fallback] = 0.0
        return g
    return cot * np.exp(sample.raw) * sample.active


def backward(net: FieldNetwork, sample: FieldSample, cot) -> list:
    """Parameter gradients [dW0, db0, dW1, db1, ...] for output cotangents ``cot``."""
    if sample.version != net.version or sample.net_id != id(net):
        raise StaleCacheError("forward cache does not match the current network parameters")
    g = output_cotangent_to_raw(net, sample, np.asarray(cot, float))
    grads = []
    h = sample.cache[-1]
    grads.append((g.T @ h, g.sum(axis=0)))
    dh = g @ net.weights[-1]
    for layer in range(net.depth - 1, -1, -1):
        z = sample.cache[1 + 2 * layer]
        h_prev = sample.cache[2 * layer]
        dz = net.omega0 * dh * np.cos(z)
        grads.append((dz.T @ h_prev, dz.sum(axis=0)))
        if layer:
            dh = dz @ net.weights[layer]
    grads.reverse()
    return [p for pair in grads for p in pair]


def flatten(grads) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads])


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (little-endian):
#   8 bytes   magic "CSFIELD1"
#   u32       head (0 = quaternion, 1 = scale)
#   u32       number of layers L (hidden layers + output layer)
#   f64 x 3   omega0, s_min, s_max
#   f64 x 6   input_lo[3], input_hi[3]
#   L blocks: u32 rows, u32 cols, rows*cols f64 weights (row-major), rows f64 biases


def save_network(path, net: FieldNetwork) -> None:
    Path(path).write_bytes(network_bytes(net))


def network_bytes(net: FieldNetwork) -> bytes:
    parts = [_MAGIC, struct.pack("<II", 0 if net.head == QUATERNION else 1, len(net.weights)),
             struct.pack("<3d", net.omega0, net.s_min, net.s_max),
             np.concatenate([net.input_lo, net.input_hi]).astype("<f8").tobytes()]
    for W, b in zip(net.weights, net.biases):
        parts.append(struct.pack("<II", *W.shape))
        parts.append(np.ascontiguousarray(W, "<f8").tobytes())
        parts.append(np.ascontiguousarray(b, "<f8").tobytes())
    return b"".join(parts)


def load_network(path) -> FieldNetwork:
    return network_from_bytes(Path(path).read_bytes())


def network_from_bytes(data: bytes) -> FieldNetwork:
    if data[:8] != _MAGIC:
        raise ValueError("not a field-network checkpoint")
    off = 8
    head_code, n_layers = struct.unpack_from("<II", data, off)
    off += 8
    omega0, s_min, s_max = struct.unpack_from("<3d", data, off)
    off += 24
    box = np.frombuffer(data, "<f8", 6, off).astype(float)
    off += 48
    weights, biases = [], []
    for _ in range(n_layers):
        r, c = struct.unpack_from("<II", data, off)
        off += 8
        weights.append(np.frombuffer(data, "<f8", r * c, off).astype(float).reshape(r, c))
        off += 8 * r * c
        biases.append(np.frombuffer(data, "<f8", r, off).astype(float))
        off += 8 * r
    head = QUATERNION if head_code == 0 else SCALE
    return FieldNetwork(head, weights, biases, omega0, box[:3].copy(), box[3:].copy(), s_min, s_max)

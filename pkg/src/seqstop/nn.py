"""A small float64 multilayer perceptron with hand-written backprop and Adam.

Hidden layers use ReLU.  The head is either linear (Q-values) or softmax
(policy probabilities, with an optional mask of illegal actions).

Binary parameter layout (little endian)::

    8 bytes   magic  b"SQMLP\\x00\\x01\\x00"
    uint32    number of layers L
    uint32    head   (0 = linear, 1 = softmax)
    uint32    sizes[0..L]
    float64   W_1 (sizes[0] x sizes[1], row-major), b_1 (sizes[1]), ..., W_L, b_L
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import NumericalError

MAGIC = b"SQMLP\x00\x01\x00"
HEADS = ("linear", "softmax")
DEFAULT_SIZES = (2, 64, 64, 3)


class NonFiniteGradient(NumericalError):
    pass


def softmax(z: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


@dataclass
class Cache:
    inputs: list       # input to each layer
    pre: list          # pre-activation of each layer
    output: np.ndarray


@dataclass
class MLP:
    sizes: tuple[int, ...]
    weights: list
    biases: list
    head: str = "linear"

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"invalid layer sizes {self.sizes}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[i], self.sizes[i + 1]) or b.shape != (self.sizes[i + 1],):
                raise ValueError(f"layer {i} has shapes {w.shape}, {b.shape}")

    @classmethod
    def init(cls, sizes=DEFAULT_SIZES, seed: int | np.random.Generator = 0, head: str = "linear") -> "MLP":
        """Fan-in scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), same for biases."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        sizes = tuple(int(s) for s in sizes)
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = 1.0 / np.sqrt(fan_in)
            ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            bs.append(rng.uniform(-lim, lim, size=fan_out))
        return cls(sizes, ws, bs, head)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MLP":
        return MLP(self.sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.head)

    def forward(self, x, mask: np.ndarray | None = None) -> tuple[np.ndarray, Cache]:
        h = np.atleast_2d(np.asarray(x, dtype=float))
        inputs, pre = [], []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0) if i < self.n_layers - 1 else z
        out = softmax(h, mask) if self.head == "softmax" else h
        return out, Cache(inputs, pre, out)

    def __call__(self, x, mask=None) -> np.ndarray:
        return self.forward(x, mask)[0]

    def backward(self, cache: Cache, grad_out, wrt: str = "output") -> list:
        """Gradients ``[dW1, db1, ...]`` of a loss given its gradient at the head.

        ``wrt="logits"`` takes the gradient with respect to the last
        pre-activation directly (skipping the softmax Jacobian).
        """
        g = np.atleast_2d(np.asarray(grad_out, dtype=float))
        if self.head == "softmax" and wrt == "output":
            p = cache.output
            g = p * (g - np.sum(g * p, axis=-1, keepdims=True))
        grads = [None] * (2 * self.n_layers)
        for i in range(self.n_layers - 1, -1, -1):
            if i < self.n_layers - 1:
                g = g * (cache.pre[i] > 0)
            grads[2 * i] = cache.inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i:
                g = g @ self.weights[i].T
        check_finite(grads)
        return grads

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", self.n_layers, HEADS.index(self.head)))
            fh.write(struct.pack(f"<{len(self.sizes)}I", *self.sizes))
            for p in self.params():
                fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "MLP":
        data = Path(path).read_bytes()
        if data[:8] != MAGIC:
            raise ValueError(f"{path}: not an MLP parameter file")
        n_layers, head = struct.unpack_from("<II", data, 8)
        off = 16
        sizes = struct.unpack_from(f"<{n_layers + 1}I", data, off)
        off += 4 * (n_layers + 1)
        ws, bs = [], []
        for i in range(n_layers):
            n_w, n_b = sizes[i] * sizes[i + 1], sizes[i + 1]
            ws.append(np.frombuffer(data, "<f8", n_w, off).reshape(sizes[i], sizes[i + 1]).astype(float))
            off += 8 * n_w
            bs.append(np.frombuffer(data, "<f8", n_b, off).astype(float))
            off += 8 * n_b
        if off != len(data):
            raise ValueError(f"{path}: {len(data) - off} trailing bytes")
        return cls(tuple(sizes), ws, bs, HEADS[head])

    def export_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "param", "row", "col", "value"])
            for i, (wt, b) in enumerate(zip(self.weights, self.biases)):
                for (r, c), v in np.ndenumerate(wt):
                    w.writerow([i, "W", r, c, repr(float(v))])
                for r, v in enumerate(b):
                    w.writerow([i, "b", r, 0, repr(float(v))])

    def equals(self, other: "MLP") -> bool:
        return (self.sizes == other.sizes and self.head == other.head
                and all(np.array_equal(a, b) for a, b in zip(self.params(), other.params())))


def check_finite(grads) -> None:
    for j, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            kind = "weight" if j % 2 == 0 else "bias"
            raise NonFiniteGradient(f"non-finite {kind} gradient in layer {j // 2}")


@dataclass
class Adam:
    """Adaptive-moment optimiser state with bias correction."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("invalid Adam hyper-parameters")

    def update(self, net: MLP, grads: list, ascent: bool = False) -> None:
        """One in-place step on ``net`` (descent by default)."""
        check_finite(grads)
        params = net.params()
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
            raise ValueError("gradient shapes do not match the network")
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        sign = 1.0 if ascent else -1.0
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p += sign * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimizer_step(net: MLP, grads: list, state: Adam, ascent: bool = False) -> MLP:
    state.update(net, grads, ascent)
    return net


def numerical_gradient(net: MLP, loss_fn, h: float = 1e-5) -> list:
    """Central finite differences of ``loss_fn(net)`` for every parameter."""
    out = []
    for p in net.params():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss_fn(net)
            p[idx] = old - h
            down = loss_fn(net)
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out

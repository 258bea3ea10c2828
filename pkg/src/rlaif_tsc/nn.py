"""Dense 2x256 MLP with manual backprop and an AdamW optimizer.

Everything is float64. A net caches the activations of its most recent
forward pass; ``backward`` consumes that cache and returns one ``(dW, db)``
tuple per layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LEAKY_SLOPE = 0.01
HIDDEN_UNITS = 256
CHECKPOINT_FORMAT = "rlaif-tsc/densenet"
CHECKPOINT_VERSION = 1


class ContractError(ValueError):
    """Raised when an input violates a shape or domain precondition."""


class NonFiniteGradientError(ValueError):
    pass


def leaky_relu(x: np.ndarray) -> np.ndarray:
    # max(x, slope*x) equals the piecewise definition because slope < 1
    return np.maximum(x, LEAKY_SLOPE * x)


def leaky_relu_grad(x: np.ndarray) -> np.ndarray:
    out = (x >= 0.0).astype(np.float64)
    out *= 1.0 - LEAKY_SLOPE
    out += LEAKY_SLOPE
    return out


class DenseNet:
    """input -> 256 -> 256 -> output, LeakyReLU hidden, linear head.

    Parameters are initialised from ``numpy.random.default_rng(seed)`` with
    uniform fan-in scaling (He-uniform on the hidden layers, LeCun-uniform on
    the head). Biases start at zero.
    """

    def __init__(self, in_dim: int, out_dim: int, seed: int = 0, hidden: int = HIDDEN_UNITS):
        if in_dim <= 0 or out_dim <= 0:
            raise ContractError("layer widths must be positive")
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.hidden = int(hidden)
        self.seed = int(seed)
        self.step = 0
        self.version = 0
        rng = np.random.default_rng(seed)
        sizes = self.architecture
        self.flat = np.zeros(self._count(sizes))
        self._bind_views()
        for i, (fan_in, w) in enumerate(zip(sizes[:-1], self.weights)):
            gain = 3.0 if i == len(sizes) - 2 else 6.0
            limit = np.sqrt(gain / fan_in)
            w[...] = rng.uniform(-limit, limit, size=w.shape)
        self._cache: tuple | None = None

    @staticmethod
    def _count(sizes: list[int]) -> int:
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    def _bind_views(self) -> None:
        # weights and biases are views into one flat vector so the optimizer
        # can update everything in a single vectorised pass
        sizes = self.architecture
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        off = 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.weights.append(self.flat[off:off + fan_in * fan_out].reshape(fan_in, fan_out))
            off += fan_in * fan_out
            self.biases.append(self.flat[off:off + fan_out])
            off += fan_out

    def __getstate__(self):
        return {k: v for k, v in self.__dict__.items() if k not in ("weights", "biases", "_cache")}

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._bind_views()
        self._cache = None

    @property
    def architecture(self) -> list[int]:
        return [self.in_dim, self.hidden, self.hidden, self.out_dim]

    @property
    def n_params(self) -> int:
        return self.flat.size

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the net on a vector ``(in,)`` or a batch ``(n, in)``."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ContractError(f"expected input width {self.in_dim}, got shape {x.shape}")
        w1, w2, w3 = self.weights
        b1, b2, b3 = self.biases
        z1 = x @ w1
        z1 += b1
        a1 = leaky_relu(z1)
        z2 = a1 @ w2
        z2 += b2
        a2 = leaky_relu(z2)
        y = a2 @ w3
        y += b3
        self._cache = (x, z1, a1, z2, a2, squeeze, self.version)
        return y[0] if squeeze else y

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass that leaves the backward cache untouched."""
        cache = self._cache
        try:
            return self.forward(x)
        finally:
            self._cache = cache

    def backward(self, loss_grad: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Gradients of a scalar loss given ``dL/dy`` for the cached forward."""
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        x, z1, a1, z2, a2, squeeze, version = self._cache
        if version != self.version:
            raise RuntimeError("parameters changed since the cached forward pass")
        g = np.asarray(loss_grad, dtype=np.float64)
        if squeeze and g.ndim == 1:
            g = g[None, :]
        if g.shape != (x.shape[0], self.out_dim):
            raise ContractError(f"loss gradient shape {g.shape} does not match output")
        w1, w2, w3 = self.weights
        dw3 = a2.T @ g
        db3 = g.sum(axis=0)
        d2 = g @ w3.T
        d2 *= leaky_relu_grad(z2)
        dw2 = a1.T @ d2
        db2 = d2.sum(axis=0)
        d1 = d2 @ w2.T
        d1 *= leaky_relu_grad(z1)
        dw1 = x.T @ d1
        db1 = d1.sum(axis=0)
        return [(dw1, db1), (dw2, db2), (dw3, db3)]

    def copy_from(self, other: "DenseNet") -> None:
        if other.architecture != self.architecture:
            raise ContractError("architecture mismatch")
        self.flat[:] = other.flat
        self.version += 1
        self._cache = None

    def clone(self) -> "DenseNet":
        net = DenseNet.__new__(DenseNet)
        net.in_dim, net.out_dim, net.hidden = self.in_dim, self.out_dim, self.hidden
        net.seed, net.step, net.version = self.seed, self.step, self.version
        net.flat = self.flat.copy()
        net._bind_views()
        net._cache = None
        return net

    def all_finite(self) -> bool:
        return bool(np.isfinite(self.flat).all())

    def save(self, path: str | Path) -> None:
        header = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "architecture": self.architecture,
            "activation": {"hidden": "leaky_relu", "slope": LEAKY_SLOPE, "output": "identity"},
            "seed": self.seed,
            "step": self.step,
        }
        arrays = {f"layer{i}_{k}": a for i, (w, b) in enumerate(zip(self.weights, self.biases))
                  for k, a in (("weight", w), ("bias", b))}
        with open(path, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header)), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "DenseNet":
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            if header.get("format") != CHECKPOINT_FORMAT:
                raise ContractError(f"{path}: not a DenseNet checkpoint")
            if header["version"] > CHECKPOINT_VERSION:
                raise ContractError(f"{path}: checkpoint version {header['version']} is newer than supported")
            in_dim, hidden, _, out_dim = header["architecture"]
            net = cls.__new__(cls)
            net.in_dim, net.out_dim, net.hidden = in_dim, out_dim, hidden
            net.seed, net.step, net.version = header["seed"], header["step"], 0
            net.flat = np.zeros(cls._count(net.architecture))
            net._bind_views()
            for i in range(3):
                net.weights[i][...] = data[f"layer{i}_weight"]
                net.biases[i][...] = data[f"layer{i}_bias"]
            net._cache = None
        return net


@dataclass
class AdamW:
    """Adam with decoupled weight decay (Loshchilov & Hutter style).

    The decay shrinks parameters by ``lr * weight_decay`` before the Adam
    step; it never enters the moment estimates.
    """

    lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def step(self, net: DenseNet, grads: list[tuple[np.ndarray, np.ndarray]]) -> None:
        flat_grads = [g for pair in grads for g in pair]
        params = net.params()
        if len(flat_grads) != len(params) or any(g.shape != p.shape for g, p in zip(flat_grads, params)):
            raise ContractError("gradients are not shape-congruent with the net")
        g = np.concatenate([x.reshape(-1) for x in flat_grads])
        if not np.isfinite(g).all():
            raise NonFiniteGradientError("non-finite gradient component; step rejected")
        p = net.flat
        if not self.m:
            self.m = [np.zeros_like(p)]
            self.v = [np.zeros_like(p)]
        m, v = self.m[0], self.v[0]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        p *= 1.0 - self.lr * self.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        g *= g
        g *= 1.0 - b2
        v += g
        denom = np.sqrt(v / c2)
        denom += self.eps
        p -= (self.lr / c1) * m / denom
        net.step += 1
        net.version += 1
        net._cache = None

    def moments(self, net: DenseNet) -> list[tuple[np.ndarray, np.ndarray]]:
        """First/second moments reshaped like ``net.params()``."""
        out = []
        off = 0
        for prm in net.params():
            out.append((self.m[0][off:off + prm.size].reshape(prm.shape),
                        self.v[0][off:off + prm.size].reshape(prm.shape)))
            off += prm.size
        return out

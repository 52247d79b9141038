"""Small dense-network toolkit with hand-written reverse mode.

Everything the policy, critics and safety model need lives here: named
parameter storage with gradient slots, fully connected layers, softmax,
Adam, and a binary checkpoint format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MAGIC = b"SNPS"


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class StaleCacheError(RuntimeError):
    """Backward was called with a cache recorded under different weights."""


class ParamSet:
    """Named tensors, each with a gradient slot of the same shape.

    ``version`` is bumped on every in-place weight change so that forward
    caches can detect they no longer match the weights.  ``dtype`` is float64
    by default; float32 roughly halves training cost.  After :meth:`pack` all
    tensors are views into one flat buffer so optimizer updates are vectorized.
    """

    def __init__(self, dtype=np.float64) -> None:
        self.dtype = np.dtype(dtype)
        self.tensors: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.version = 0
        self.flat: np.ndarray | None = None
        self.flat_grad: np.ndarray | None = None

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        if self.flat is not None:
            raise RuntimeError("cannot add parameters after pack()")
        arr = np.array(value, dtype=self.dtype)
        self.tensors[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def pack(self) -> None:
        """Move all tensors (and gradients) into contiguous flat buffers."""
        if self.flat is not None:
            return
        n = self.num_params
        self.flat = np.empty(n, dtype=self.dtype)
        self.flat_grad = np.zeros(n, dtype=self.dtype)
        pos = 0
        for name, t in self.tensors.items():
            view = self.flat[pos:pos + t.size].reshape(t.shape)
            view[...] = t
            self.tensors[name] = view
            self.grads[name] = self.flat_grad[pos:pos + t.size].reshape(t.shape)
            pos += t.size

    def zero_grad(self) -> None:
        if self.flat_grad is not None:
            self.flat_grad.fill(0.0)
            return
        for g in self.grads.values():
            g.fill(0.0)

    def bump(self) -> None:
        self.version += 1

    def copy(self) -> ParamSet:
        out = ParamSet(self.dtype)
        for name, t in self.tensors.items():
            out.add(name, t.copy())
        out.version = self.version
        return out

    def assign(self, other: ParamSet) -> None:
        """Copy ``other``'s values into this set in place."""
        self._check_compatible(other)
        for name, t in self.tensors.items():
            t[...] = other.tensors[name]
        self.bump()

    def polyak(self, source: ParamSet, tau: float) -> None:
        """In-place ``self <- tau * source + (1 - tau) * self``."""
        self._check_compatible(source)
        if tau == 1.0:
            self.assign(source)
            return
        if self.flat is not None and source.flat is not None:
            self.flat *= 1.0 - tau
            self.flat += tau * source.flat
        else:
            for name, t in self.tensors.items():
                t *= 1.0 - tau
                t += tau * source.tensors[name]
        self.bump()

    def equal(self, other: ParamSet) -> bool:
        if list(self.tensors) != list(other.tensors):
            return False
        return all(np.array_equal(t, other.tensors[n]) for n, t in self.tensors.items())

    def _check_compatible(self, other: ParamSet) -> None:
        if list(self.tensors) != list(other.tensors):
            raise ValueError("parameter sets have different names")
        for name, t in self.tensors.items():
            if t.shape != other.tensors[name].shape:
                raise ValueError(f"shape mismatch for {name!r}")


# ---------------------------------------------------------------------------
# activations


def _relu(z):
    return np.maximum(z, 0.0)


def _sigmoid(z):
    # split to avoid overflow in exp for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


ACTIVATIONS = ("relu", "sigmoid", "tanh", "linear")


def activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return _relu(z)
    if kind == "sigmoid":
        return _sigmoid(z)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "linear":
        return z
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(kind: str, z: np.ndarray, y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the pre-activation ``z`` given output ``y`` and ``dy``."""
    if kind == "relu":
        return dy * (z > 0.0)
    if kind == "sigmoid":
        return dy * y * (1.0 - y)
    if kind == "tanh":
        return dy * (1.0 - y * y)
    if kind == "linear":
        return dy
    raise ValueError(f"unknown activation {kind!r}")


def softmax(v, axis: int = -1, mask=None) -> np.ndarray:
    """Numerically stable softmax; entries where ``mask`` is False get exactly 0."""
    v = np.asarray(v)
    if not np.issubdtype(v.dtype, np.floating):
        v = v.astype(np.float64)
    if mask is not None:
        v = np.where(mask, v, -np.inf)
    m = np.max(v, axis=axis, keepdims=True)
    e = np.exp(v - m)
    return e / np.sum(e, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# layers


def init_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class _DenseCache:
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    version: int


class Dense:
    """Affine map followed by an elementwise activation, on 2-D batches."""

    def __init__(self, params: ParamSet, name: str, n_in: int, n_out: int,
                 activation: str, rng: np.random.Generator):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if n_in < 1 or n_out < 1:
            raise ValueError("layer widths must be >= 1")
        self.params = params
        self.name = name
        self.n_in = n_in
        self.n_out = n_out
        self.activation = activation
        self.w_name = f"{name}.w"
        self.b_name = f"{name}.b"
        params.add(self.w_name, init_uniform(rng, n_in, (n_in, n_out)))
        params.add(self.b_name, init_uniform(rng, n_in, (n_out,)))

    def forward(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"{self.name}: expected (*, {self.n_in}) input, got {x.shape}")
        x = x.astype(self.params.dtype, copy=False)
        z = x @ self.params.tensors[self.w_name] + self.params.tensors[self.b_name]
        y = activate(self.activation, z)
        return y, _DenseCache(x, z, y, self.params.version)

    def backward(self, cache: _DenseCache, dy: np.ndarray, param_grads: bool = True) -> np.ndarray:
        if cache.version != self.params.version:
            raise StaleCacheError(f"{self.name}: cache from version {cache.version}, "
                                  f"params at {self.params.version}")
        dy = dy.astype(self.params.dtype, copy=False)
        dz = activation_grad(self.activation, cache.z, cache.y, dy)
        if param_grads:
            self.params.grads[self.w_name] += cache.x.T @ dz
            self.params.grads[self.b_name] += dz.sum(axis=0)
        return dz @ self.params.tensors[self.w_name].T


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if len(self.widths) != len(self.activations):
            raise ValueError("one activation per layer required")
        if self.input_dim < 1 or any(w < 1 for w in self.widths):
            raise ValueError("widths must be >= 1")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def output_dim(self) -> int:
        return self.widths[-1]


class MLP:
    def __init__(self, params: ParamSet, name: str, spec: MlpSpec, rng: np.random.Generator):
        self.spec = spec
        self.params = params
        self.layers = []
        n_in = spec.input_dim
        for i, (w, act) in enumerate(zip(spec.widths, spec.activations)):
            self.layers.append(Dense(params, f"{name}.l{i}", n_in, w, act, rng))
            n_in = w

    def forward(self, x: np.ndarray):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, caches, dy: np.ndarray, param_grads: bool = True) -> np.ndarray:
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(c, dy, param_grads)
        return dy


def mlp_forward(net: MLP, x: np.ndarray):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return net.forward(x)


def backward(net: MLP, dy: np.ndarray, caches) -> np.ndarray:
    """Accumulate parameter gradients into ``net.params``; returns dL/dx."""
    return net.backward(caches, np.atleast_2d(dy))


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ParamSet, m: dict, v: dict, hyper: AdamHyper, t: int) -> None:
    """One bias-corrected Adam update at step ``t`` (1-based); clears the gradients."""
    if t < 1:
        raise ValueError("adam step counter starts at 1")
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    if params.flat is not None and isinstance(m, np.ndarray):
        g = params.flat_grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params.flat -= (hyper.lr / c1) * m / (np.sqrt(v / c2) + hyper.eps)
        g.fill(0.0)
        params.bump()
        return
    for name, p in params.tensors.items():
        g = params.grads[name]
        m[name] *= b1
        m[name] += (1.0 - b1) * g
        v[name] *= b2
        v[name] += (1.0 - b2) * g * g
        p -= hyper.lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + hyper.eps)
        g.fill(0.0)
    params.bump()


class Adam:
    def __init__(self, params: ParamSet, hyper: AdamHyper | None = None):
        self.params = params
        self.hyper = hyper or AdamHyper()
        params.pack()
        self.m = np.zeros_like(params.flat)
        self.v = np.zeros_like(params.flat)
        self.t = 0

    def step(self) -> None:
        self.t += 1
        adam_step(self.params, self.m, self.v, self.hyper, self.t)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little endian):
#   magic "SNPS" | u32 format version | u64 param version | u32 tensor count
#   per tensor: u16 name length | name utf-8 | u8 ndim | u32 * ndim shape | f64 data


def save_params(params: ParamSet, path) -> None:
    chunks = [MAGIC, struct.pack("<IQI", FORMAT_VERSION, params.version, len(params))]
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> ParamSet:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a parameter checkpoint")
    fmt, pversion, count = struct.unpack("<IQI", take(16))
    if fmt != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {fmt}, expected {FORMAT_VERSION}")
    params = ParamSet()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape)
        params.add(name, data)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    params.version = pversion
    return params

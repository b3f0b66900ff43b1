"""Small dense networks with hand-written reverse mode, Adam, and the temporal encoding.

The 1x1 "convolutions" of the feature-lifting and uncertainty heads are plain
per-pixel dense layers: feed an (H, W, C) map and every pixel goes through the
same weights.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("none", "relu", "softplus", "sigmoid", "tanh")


class Diverged(FloatingPointError):
    pass


class StaleCache(RuntimeError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _act(name: str, x):
    if name == "none":
        return x
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "softplus":
        return softplus(x)
    if name == "sigmoid":
        return sigmoid(x)
    if name == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, pre, post):
    if name == "none":
        return np.ones_like(pre)
    if name == "relu":
        return (pre > 0).astype(pre.dtype)
    if name == "softplus":
        return sigmoid(pre)
    if name == "sigmoid":
        return post * (1.0 - post)
    if name == "tanh":
        return 1.0 - post * post
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    act: str = "none"

    def __post_init__(self):
        if self.act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.act!r}")


@dataclass
class Mlp:
    layers: list[Layer]
    name: str = ""
    version: int = 0  # bumped on every parameter update, invalidates caches

    def __post_init__(self):
        for l0, l1 in zip(self.layers, self.layers[1:]):
            if l0.W.shape[0] != l1.W.shape[1]:
                raise ValueError("layer dimensions do not chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.W.copy(), l.b.copy(), l.act) for l in self.layers], self.name, self.version)

    def zero_(self) -> "Mlp":
        for p in self.params():
            p[...] = 0.0
        self.version += 1
        return self


@dataclass
class MlpCache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    post: list[np.ndarray]
    lead_shape: tuple
    version: int
    mlp_id: int


def init_mlp(dims: list[int], acts: list[str], rng: np.random.Generator, name: str = "") -> Mlp:
    """Glorot-uniform weights, zero biases."""
    if len(acts) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for fi, fo, act in zip(dims[:-1], dims[1:], acts):
        lim = np.sqrt(6.0 / (fi + fo))
        layers.append(Layer(rng.uniform(-lim, lim, size=(fo, fi)), np.zeros(fo), act))
    return Mlp(layers, name)


def forward(mlp: Mlp, x) -> tuple[np.ndarray, MlpCache]:
    """Evaluate on a vector, a batch (n, in) or a per-pixel map (H, W, in)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != mlp.in_dim:
        raise ValueError(f"{mlp.name or 'mlp'}: input dim {x.shape[-1]} != {mlp.in_dim}")
    lead = x.shape[:-1]
    h = x.reshape(-1, mlp.in_dim)
    inputs, pre, post = [], [], []
    for layer in mlp.layers:
        inputs.append(h)
        z = h @ layer.W.T + layer.b
        h = _act(layer.act, z)
        pre.append(z)
        post.append(h)
    return h.reshape(*lead, mlp.out_dim), MlpCache(inputs, pre, post, lead, mlp.version, id(mlp))


def backward(mlp: Mlp, cache: MlpCache, grad_out) -> tuple[list[np.ndarray], np.ndarray]:
    """Parameter gradients (ordered like ``mlp.params()``) and the input gradient."""
    if cache.mlp_id != id(mlp) or cache.version != mlp.version:
        raise StaleCache("cache does not belong to the current parameters")
    g = np.asarray(grad_out, dtype=np.float64).reshape(-1, mlp.out_dim)
    grads: list[np.ndarray] = []
    for i in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[i]
        g = g * _act_grad(layer.act, cache.pre[i], cache.post[i])
        grads = [g.T @ cache.inputs[i], g.sum(axis=0)] + grads
        g = g @ layer.W
    return grads, g.reshape(*cache.lead_shape, mlp.in_dim)


def temporal_encode(t: float) -> np.ndarray:
    return np.array([np.sin(np.pi * t), np.cos(np.pi * t)])


@dataclass
class AdamState:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def ensure(self, params: list[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        for k, p in enumerate(params):
            if self.m[k].shape != p.shape:
                raise ValueError(f"moment shape {self.m[k].shape} != parameter shape {p.shape}")

    def append_rows(self, k: int, n: int) -> None:
        """Grow the moments of parameter ``k`` by ``n`` zero rows."""
        if self.m:
            pad = np.zeros((n,) + self.m[k].shape[1:])
            self.m[k] = np.concatenate([self.m[k], pad])
            self.v[k] = np.concatenate([self.v[k], pad.copy()])

    def select_rows(self, k: int, idx) -> None:
        if self.m:
            self.m[k] = self.m[k][idx]
            self.v[k] = self.v[k][idx]


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """Bias-corrected Adam update, in place."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise Diverged("diverged")
    state.ensure(params)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def mlp_adam_step(state: AdamState, mlp: Mlp, grads: list[np.ndarray]) -> None:
    adam_step(state, mlp.params(), grads)
    mlp.version += 1


def grad_check(f, params: list[np.ndarray], h: float = 1e-5, n_coords: int | None = None,
               rng: np.random.Generator | None = None, floor: float = 1e-7) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f(params)`` returns ``(value, grads)`` with grads shaped like params.
    Coordinates are perturbed in place and restored.  With ``n_coords`` only
    that many random coordinates per array are checked.
    """
    rng = rng or np.random.default_rng(0)
    _, analytic = f(params)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        coords = range(flat.size) if n_coords is None or n_coords >= flat.size else rng.choice(flat.size, n_coords, replace=False)
        for i in coords:
            old = flat[i]
            flat[i] = old + h
            fp = f(params)[0]
            flat[i] = old - h
            fm = f(params)[0]
            flat[i] = old
            num = (fp - fm) / (2.0 * h)
            err = abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), floor)
            worst = max(worst, err)
    return worst


# architectures ---------------------------------------------------------------

def attribute_decoder(in_dim: int, out_dim: int, out_act: str, rng, hidden: int = 32, name: str = "") -> Mlp:
    return init_mlp([in_dim, hidden, out_dim], ["relu", out_act], rng, name)


def feature_decoder(in_dim: int, k: int, n_low: int, rng, hidden: int = 32) -> Mlp:
    return init_mlp([in_dim, hidden, k * n_low], ["softplus", "none"], rng, "F_d")


def lifting_mlp(n_low: int, n_high: int, rng, hidden: int = 128) -> Mlp:
    return init_mlp([n_low, hidden, n_high], ["relu", "none"], rng, "F_m")


def uncertainty_mlp(n_high: int, rng, hidden: int = 128) -> Mlp:
    return init_mlp([n_high, hidden, 1], ["relu", "softplus"], rng, "F_u")


# checkpoint format -------------------------------------------------------------

_MAGIC = b"UPNN"


def mlp_to_bytes(mlp: Mlp) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", len(mlp.layers)))
    for layer in mlp.layers:
        fo, fi = layer.W.shape
        buf.write(struct.pack("<III", fi, fo, ACTIVATIONS.index(layer.act)))
        buf.write(layer.W.astype("<f4").tobytes())
        buf.write(layer.b.astype("<f4").tobytes())
    return buf.getvalue()


def mlp_from_bytes(data: bytes, offset: int = 0) -> tuple[Mlp, int]:
    """Parse one checkpoint starting at ``offset``; returns the network and the end offset."""
    if data[offset : offset + 4] != _MAGIC:
        raise ValueError("not a UPNN checkpoint")
    pos = offset + 4
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    layers = []
    for _ in range(n):
        fi, fo, act = struct.unpack_from("<III", data, pos)
        pos += 12
        W = np.frombuffer(data, "<f4", fo * fi, pos).astype(np.float64).reshape(fo, fi)
        pos += 4 * fo * fi
        b = np.frombuffer(data, "<f4", fo, pos).astype(np.float64)
        pos += 4 * fo
        layers.append(Layer(W, b, ACTIVATIONS[act]))
    return Mlp(layers), pos


def save_mlp(mlp: Mlp, path) -> None:
    with open(path, "wb") as fh:
        fh.write(mlp_to_bytes(mlp))


def load_mlp(path) -> Mlp:
    with open(path, "rb") as fh:
        return mlp_from_bytes(fh.read())[0]

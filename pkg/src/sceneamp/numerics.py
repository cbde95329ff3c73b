"""Fully-connected networks with hand-written gradients, an Adam optimizer,
diagonal Gaussian helpers and the checkpoint container.

Everything is float64. Networks use ReLU hidden units and an identity output
layer. All functions accept a single input vector or a batch (leading axis);
parameter gradients are summed over the batch.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1
LOG_2PI = float(np.log(2.0 * np.pi))


class ShapeError(ValueError):
    pass


@dataclass
class NetParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeError("weights/biases length mismatch")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} incompatible with bias {b.shape}")
            if k > 0 and self.weights[k - 1].shape[0] != w.shape[1]:
                raise ShapeError(
                    f"layer {k} expects {w.shape[1]} inputs, previous layer emits "
                    f"{self.weights[k - 1].shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "NetParams":
        arrays = list(arrays)
        return cls(weights=arrays[0::2], biases=arrays[1::2])

    def copy(self) -> "NetParams":
        return NetParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "NetParams":
        return NetParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "NetParams":
        arrays, i = [], 0
        for a in self.arrays():
            arrays.append(np.asarray(vec[i:i + a.size], dtype=np.float64).reshape(a.shape).copy())
            i += a.size
        return NetParams.from_arrays(arrays)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_mlp(sizes, rng: np.random.Generator, out_scale: float = 1.0) -> NetParams:
    """Glorot-uniform weights, zero biases; the last layer is scaled by `out_scale`."""
    weights, biases = [], []
    for k in range(len(sizes) - 1):
        fan_in, fan_out = sizes[k], sizes[k + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        if k == len(sizes) - 2:
            w = w * out_scale
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return NetParams(weights, biases)


def _check_input(params: NetParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"input has {x.shape[-1]} features, network expects {params.in_dim}")
    return x


def mlp_forward(params: NetParams, x) -> np.ndarray:
    h = _check_input(params, x)
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h


def mlp_forward_cache(params: NetParams, x):
    """Forward pass keeping the layer inputs and ReLU masks for backprop."""
    h = _check_input(params, x)
    inputs, masks = [], []
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w.T + b
        if k < last:
            m = z > 0.0
            masks.append(m)
            h = np.where(m, z, 0.0)
        else:
            h = z
    return h, (inputs, masks)


def mlp_backward(params: NetParams, x, upstream_grad, cache=None):
    """Gradients of sum(upstream_grad * output) w.r.t. parameters and input.

    Returns (param_grads, input_grad). With a batch, param grads are summed over
    the batch and input_grad keeps the batch axis.
    """
    if cache is None:
        _, cache = mlp_forward_cache(params, x)
    inputs, masks = cache
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape[-1] != params.out_dim:
        raise ShapeError(f"upstream grad has {g.shape[-1]} entries, network emits {params.out_dim}")
    gw, gb = [None] * len(params.weights), [None] * len(params.weights)
    for k in range(len(params.weights) - 1, -1, -1):
        h = inputs[k]
        if g.ndim == 1:
            gw[k] = np.outer(g, h)
            gb[k] = g.copy()
        else:
            gw[k] = g.T @ h
            gb[k] = g.sum(axis=0)
        g = g @ params.weights[k]
        if k > 0:
            g = g * masks[k - 1]
    return NetParams(gw, gb), g


def input_grad_penalty(params: NetParams, x, cache=None):
    """Squared input-gradient norm of a scalar-output net and its parameter gradient.

    For each row x_i returns P_i = ||d out / d x_i||^2. The parameter gradient is
    that of sum_i P_i. ReLU masks are piecewise constant so biases get zero
    gradient almost everywhere.
    """
    if params.out_dim != 1:
        raise ShapeError("gradient penalty needs a scalar-output network")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if cache is None:
        _, cache = mlp_forward_cache(params, x)
    inputs, masks = cache
    n_layers = len(params.weights)
    batch = x.shape[0]
    # backward signals c_k at the output of layer k (pre-activation side)
    c = [None] * n_layers
    c[-1] = np.ones((batch, 1))
    for k in range(n_layers - 1, 0, -1):
        c[k - 1] = (c[k] @ params.weights[k]) * masks[k - 1]
    g = c[0] @ params.weights[0]
    penalty = np.sum(g * g, axis=1)
    # tangent pass along direction 2g
    e = 2.0 * g
    gw = [None] * n_layers
    for k in range(n_layers):
        gw[k] = c[k].T @ e
        if k < n_layers - 1:
            e = (e @ params.weights[k].T) * masks[k]
    gb = [np.zeros_like(b) for b in params.biases]
    return penalty, NetParams(gw, gb), g


@dataclass
class OptimState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros(cls, params: NetParams) -> "OptimState":
        return cls(0, [np.zeros_like(a) for a in params.arrays()],
                   [np.zeros_like(a) for a in params.arrays()])

    def copy(self) -> "OptimState":
        return OptimState(self.step, [a.copy() for a in self.m], [a.copy() for a in self.v])


def adam_like_step(params: NetParams, grads: NetParams, state: OptimState, lr: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns new (params, state); inputs untouched."""
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if len(p_arrays) != len(g_arrays) or len(state.m) != len(p_arrays):
        raise ShapeError("params, grads and optimizer state disagree in structure")
    for i, (p, g) in enumerate(zip(p_arrays, g_arrays)):
        if p.shape != g.shape:
            raise ShapeError(f"array {i}: param {p.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise FloatingPointError(
                f"non-finite gradient in array {i} (layer {i // 2}, "
                f"{'weight' if i % 2 == 0 else 'bias'}): {bad} of {g.size} entries"
            )
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m2 = beta1 * m + (1.0 - beta1) * g
        v2 = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - lr * (m2 / c1) / (np.sqrt(v2 / c2) + eps))
        new_m.append(m2)
        new_v.append(v2)
    return NetParams.from_arrays(new_p), OptimState(t, new_m, new_v)


def gaussian_logprob(mean, sigma, action):
    """Diagonal Gaussian log density, reduced over the last axis."""
    mean = np.asarray(mean, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    z = (action - mean) / sigma
    d = mean.shape[-1]
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(sigma)) - 0.5 * d * LOG_2PI


def gaussian_sample(mean, sigma, rng: np.random.Generator):
    mean = np.asarray(mean, dtype=np.float64)
    return mean + np.asarray(sigma, dtype=np.float64) * rng.standard_normal(mean.shape)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    nets: dict[str, NetParams]
    optim: dict[str, OptimState] = field(default_factory=dict)
    sigma: np.ndarray | None = None
    step: int = 0
    layout_hash: str = ""
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs: dict[str, np.ndarray] = {}
    header = {
        "version": CHECKPOINT_VERSION,
        "step": int(ckpt.step),
        "layout_hash": ckpt.layout_hash,
        "nets": {},
        "optim": {},
        "arrays": sorted(ckpt.arrays),
        "meta": ckpt.meta,
    }
    for name, net in ckpt.nets.items():
        header["nets"][name] = len(net.weights)
        for i, a in enumerate(net.arrays()):
            blobs[f"net/{name}/{i}"] = a
    for name, st in ckpt.optim.items():
        header["optim"][name] = {"step": st.step, "n": len(st.m)}
        for i, (m, v) in enumerate(zip(st.m, st.v)):
            blobs[f"opt/{name}/m{i}"] = m
            blobs[f"opt/{name}/v{i}"] = v
    if ckpt.sigma is not None:
        blobs["sigma"] = np.asarray(ckpt.sigma, dtype=np.float64)
    for name, a in ckpt.arrays.items():
        blobs[f"arr/{name}"] = np.asarray(a)
    blobs["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, **blobs)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        nets = {}
        for name, n_layers in header["nets"].items():
            nets[name] = NetParams.from_arrays(z[f"net/{name}/{i}"] for i in range(2 * n_layers))
        optim = {}
        for name, info in header["optim"].items():
            optim[name] = OptimState(info["step"],
                                     [z[f"opt/{name}/m{i}"] for i in range(info["n"])],
                                     [z[f"opt/{name}/v{i}"] for i in range(info["n"])])
        sigma = z["sigma"] if "sigma" in z.files else None
        arrays = {name: z[f"arr/{name}"] for name in header["arrays"]}
    return Checkpoint(nets=nets, optim=optim, sigma=sigma, step=header["step"],
                      layout_hash=header["layout_hash"], arrays=arrays, meta=header["meta"])


# ---------------------------------------------------------------------------
# input normalization


@dataclass
class RunningNorm:
    """Streaming per-feature mean/variance (parallel-merge update) with clipping."""
    mean: np.ndarray
    var: np.ndarray
    count: float = 0.0
    clip: float = 5.0
    eps: float = 1e-4

    @classmethod
    def identity(cls, dim: int, clip: float = np.inf) -> "RunningNorm":
        return cls(np.zeros(dim), np.ones(dim), 0.0, clip, 0.0)

    @classmethod
    def fit(cls, x, clip: float = 5.0) -> "RunningNorm":
        norm = cls(np.zeros(np.shape(x)[-1]), np.ones(np.shape(x)[-1]), 0.0, clip)
        norm.update(x)
        return norm

    def update(self, x) -> None:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        if n == 0:
            return
        bm, bv = x.mean(axis=0), x.var(axis=0)
        tot = self.count + n
        delta = bm - self.mean
        self.mean = self.mean + delta * n / tot
        self.var = (self.var * self.count + bv * n + delta ** 2 * self.count * n / tot) / tot
        self.count = tot

    @property
    def scale(self) -> np.ndarray:
        return 1.0 / np.sqrt(self.var + self.eps)

    def __call__(self, x) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64) - self.mean) * self.scale
        return np.clip(z, -self.clip, self.clip)

    def copy(self) -> "RunningNorm":
        return RunningNorm(self.mean.copy(), self.var.copy(), self.count, self.clip, self.eps)

    def state(self) -> np.ndarray:
        return np.concatenate([[self.count, self.clip, self.eps], self.mean, self.var])

    @classmethod
    def from_state(cls, s) -> "RunningNorm":
        s = np.asarray(s, dtype=np.float64)
        d = (len(s) - 3) // 2
        return cls(s[3:3 + d].copy(), s[3 + d:].copy(), float(s[0]), float(s[1]), float(s[2]))

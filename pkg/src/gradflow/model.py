"""Time-conditioned MLP velocity field with hand-written backward passes.

Parameters live in one flat float64 vector. Layout: the weight matrices of
every layer (each ``(w_out, w_in)``, row-major), then every bias vector.
Time enters by concatenation, so the network sees ``[x, t]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .rng import make_rng

ACTIVATIONS = ("tanh", "silu")


class NonFiniteError(FloatingPointError):
    pass


def n_params(arch) -> int:
    return sum(a * b + b for a, b in zip(arch[:-1], arch[1:]))


def _layout(arch):
    """(weight slice, weight shape, bias slice) per layer."""
    out = []
    w_off = 0
    b_off = sum(a * b for a, b in zip(arch[:-1], arch[1:]))
    for w_in, w_out in zip(arch[:-1], arch[1:]):
        out.append((slice(w_off, w_off + w_in * w_out), (w_out, w_in), slice(b_off, b_off + w_out)))
        w_off += w_in * w_out
        b_off += w_out
    return out


@dataclass
class MlpParams:
    arch: tuple[int, ...]
    theta: np.ndarray
    activation: str = "silu"

    def __post_init__(self):
        self.arch = tuple(int(a) for a in self.arch)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if len(self.arch) < 3:
            raise ValueError("need at least one hidden layer")
        if min(self.arch) < 1:
            raise ValueError("zero-width layer in architecture")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.theta.shape != (n_params(self.arch),):
            raise ValueError(f"theta has length {self.theta.size}, arch needs {n_params(self.arch)}")
        if not np.all(np.isfinite(self.theta)):
            raise NonFiniteError("theta contains non-finite entries")

    @property
    def dim(self) -> int:
        return self.arch[0] - 1

    def layers(self):
        return [
            (self.theta[ws].reshape(shape), self.theta[bs])
            for ws, shape, bs in _layout(self.arch)
        ]

    def with_theta(self, theta) -> "MlpParams":
        return MlpParams(self.arch, theta, self.activation)

    def __call__(self, x, t, adapter=None):
        return forward(self, x, t, adapter)

    def param_jacobian(self, x, t):
        return param_jacobian(self, x, t)


@dataclass
class LoraAdapter:
    """Low-rank additive factors: effective weight of layer l is W + scale * B @ A."""

    rank: int
    layers: tuple[int, ...]
    A: list[np.ndarray]
    B: list[np.ndarray]
    scale: float = 1.0

    def flat(self) -> np.ndarray:
        return np.concatenate([m.ravel() for pair in zip(self.A, self.B) for m in pair])

    def with_flat(self, vec) -> "LoraAdapter":
        vec = np.asarray(vec, dtype=np.float64)
        A, B, off = [], [], 0
        for a, b in zip(self.A, self.B):
            A.append(vec[off:off + a.size].reshape(a.shape))
            off += a.size
            B.append(vec[off:off + b.size].reshape(b.shape))
            off += b.size
        if off != vec.size:
            raise ValueError("adapter vector has the wrong length")
        return LoraAdapter(self.rank, self.layers, A, B, self.scale)

    @property
    def size(self) -> int:
        return sum(a.size + b.size for a, b in zip(self.A, self.B))


@dataclass
class ConstantField:
    """v_theta(x, t) = theta. The parameters are the output itself."""

    theta: np.ndarray

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.theta, x.shape).copy()

    def param_jacobian(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = self.theta.size
        return np.broadcast_to(np.eye(d), (x.shape[0], d, d)).copy()


# -- construction -----------------------------------------------------------

def mlp_init(arch, activation: str = "silu", seed=0) -> MlpParams:
    """LeCun-normal weights (std 1/sqrt(fan_in)), zero biases."""
    arch = tuple(int(a) for a in arch)
    if len(arch) < 3:
        raise ValueError("need at least one hidden layer")
    if min(arch) < 1:
        raise ValueError("zero-width layer in architecture")
    rng = make_rng(seed)
    theta = np.zeros(n_params(arch))
    for ws, (w_out, w_in), _ in _layout(arch):
        theta[ws] = rng.standard_normal(w_out * w_in) / math.sqrt(w_in)
    return MlpParams(arch, theta, activation)


def lora_wrap(model: MlpParams, rank: int, seed=0, scale: float = 1.0, layers=None) -> LoraAdapter:
    """Zero-initialised LoRA adapter (B = 0, A random) on every linear layer.

    ``layers`` restricts the adapted layers by index. A rank above a layer's
    smaller width is allowed; B @ A then simply has full rank there.
    """
    if rank < 1:
        raise ValueError("rank must be positive")
    shapes = [shape for _, shape, _ in _layout(model.arch)]
    if layers is None:
        layers = tuple(range(len(shapes)))
    else:
        layers = tuple(int(i) for i in layers)
        if not layers or any(not 0 <= i < len(shapes) for i in layers):
            raise ValueError(f"layer indices must lie in [0, {len(shapes)})")
        if len(set(layers)) != len(layers):
            raise ValueError("duplicate layer index")
    rng = make_rng(seed)
    A = [rng.standard_normal((rank, shapes[i][1])) / math.sqrt(shapes[i][1]) for i in layers]
    B = [np.zeros((shapes[i][0], rank)) for i in layers]
    return LoraAdapter(rank, layers, A, B, float(scale))


def merge_lora(model: MlpParams, adapter: LoraAdapter) -> MlpParams:
    theta = model.theta.copy()
    lay = _layout(model.arch)
    for li, a, b in zip(adapter.layers, adapter.A, adapter.B):
        ws, shape, _ = lay[li]
        if a.shape != (adapter.rank, shape[1]) or b.shape != (shape[0], adapter.rank):
            raise ValueError(f"adapter factors do not fit layer {li}")
        theta[ws] = (theta[ws].reshape(shape) + adapter.scale * (b @ a)).ravel()
    return model.with_theta(theta)


# -- forward / backward -----------------------------------------------------

def _activate(z, kind):
    if kind == "tanh":
        return np.tanh(z)
    return z / (1.0 + np.exp(-z))


def _activate_grad(z, h, kind):
    if kind == "tanh":
        return 1.0 - h * h
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def _prepare(model, x, t):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != model.arch[0] - 1:
        raise ValueError(f"input dim {x2.shape[1]} does not match arch input {model.arch[0] - 1}")
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (x2.shape[0],))
    if not (np.all(np.isfinite(x2)) and np.all(np.isfinite(tt))):
        raise NonFiniteError("non-finite network input")
    return np.concatenate([x2, tt[:, None]], axis=1), single


def _run(model, h, adapter):
    lora = {} if adapter is None else dict(zip(adapter.layers, zip(adapter.A, adapter.B)))
    scale = 0.0 if adapter is None else adapter.scale
    hs, zs, lows = [h], [], []
    layers = model.layers()
    for li, (w, b) in enumerate(layers):
        z = h @ w.T
        low = None
        if li in lora:
            a_f, b_f = lora[li]
            low = h @ a_f.T
            z = z + scale * (low @ b_f.T)
        z = z + b
        zs.append(z)
        lows.append(low)
        if li < len(layers) - 1:
            h = _activate(z, model.activation)
            hs.append(h)
    return zs[-1], (hs, zs, lows)


def forward(model: MlpParams, x, t, adapter: LoraAdapter | None = None) -> np.ndarray:
    """Evaluate v(x, t). ``x`` is (dim,) or (n, dim); ``t`` a scalar or (n,)."""
    h, single = _prepare(model, x, t)
    out, _ = _run(model, h, adapter)
    return out[0] if single else out


def _backward(model, cache, g, adapter, per_sample=False):
    """Gradients of sum(g * output) w.r.t. theta and the adapter.

    With ``per_sample`` the batch axis is kept, giving (n, P) arrays.
    """
    hs, zs, lows = cache
    layers = model.layers()
    lay = _layout(model.arch)
    n = g.shape[0]
    shape = (n, model.theta.size) if per_sample else (model.theta.size,)
    g_theta = np.zeros(shape)
    lora = {} if adapter is None else {li: k for k, li in enumerate(adapter.layers)}
    g_a = [None] * len(lora)
    g_b = [None] * len(lora)
    dz = g
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        ws, _, bs = lay[li]
        h = hs[li]
        if adapter is None:
            if per_sample:
                g_theta[:, ws] = (dz[:, :, None] * h[:, None, :]).reshape(n, -1)
                g_theta[:, bs] = dz
            else:
                g_theta[ws] = (dz.T @ h).ravel()
                g_theta[bs] = dz.sum(axis=0)
        dh = dz @ w
        if li in lora:
            k = lora[li]
            a_f, b_f = adapter.A[k], adapter.B[k]
            dlow = dz @ b_f
            if per_sample:
                g_b[k] = adapter.scale * dz[:, :, None] * lows[li][:, None, :]
                g_a[k] = adapter.scale * dlow[:, :, None] * h[:, None, :]
            else:
                g_b[k] = adapter.scale * (dz.T @ lows[li])
                g_a[k] = adapter.scale * (dlow.T @ h)
            dh = dh + adapter.scale * (dlow @ a_f)
        if li > 0:
            dz = dh * _activate_grad(zs[li - 1], hs[li], model.activation)
    if adapter is None:
        return g_theta
    parts = [m.reshape(n, -1) if per_sample else m.ravel() for pair in zip(g_a, g_b) for m in pair]
    return np.concatenate([g_theta] + parts, axis=-1)


def loss_and_grad(
    model: MlpParams,
    x,
    t,
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
    adapter: LoraAdapter | None = None,
) -> tuple[float, np.ndarray]:
    """Reverse-mode gradient of ``objective(v(x, t))``.

    ``objective`` maps the (n, dim) model output to ``(loss, dloss/dv)``.
    Without an adapter the gradient has length ``len(theta)``. With one it
    is ``[zeros(len(theta)), adapter.flat()-shaped grad]``: the base is frozen.
    """
    h, _ = _prepare(model, x, t)
    out, cache = _run(model, h, adapter)
    loss, g = objective(out)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss}")
    return float(loss), _backward(model, cache, np.asarray(g, dtype=np.float64), adapter)


def param_jacobian(model: MlpParams, x, t, adapter: LoraAdapter | None = None) -> np.ndarray:
    """d v(x_i, t_i) / d theta for each row: shape (n, out_dim, P)."""
    h, _ = _prepare(model, x, t)
    out, cache = _run(model, h, adapter)
    n, d = out.shape
    cols = []
    for k in range(d):
        g = np.zeros((n, d))
        g[:, k] = 1.0
        cols.append(_backward(model, cache, g, adapter, per_sample=True))
    return np.stack(cols, axis=1)


def as_field(model: MlpParams, adapter: LoraAdapter | None = None) -> Callable:
    return lambda x, t: forward(model, x, t, adapter)


# -- optimiser --------------------------------------------------------------

@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, hyper: AdamHyper = AdamHyper()):
    """One bias-corrected Adam update; returns new (params, state).

    From a fresh state a zero gradient leaves the parameters unchanged.
    Once the moments are nonzero, a zero gradient still moves them.
    """
    if params.shape != grad.shape or grad.shape != state.m.shape:
        raise ValueError("params, grad and optimiser state must have matching lengths")
    step = state.step + 1
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grad
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * grad * grad
    m_hat = m / (1.0 - hyper.beta1**step)
    v_hat = v / (1.0 - hyper.beta2**step)
    new = params - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return new, AdamState(m, v, step)


# -- checkpoints ------------------------------------------------------------

def checkpoint_dict(model: MlpParams, adapter: LoraAdapter | None = None, meta: dict | None = None) -> dict:
    doc = {
        "arch": list(model.arch),
        "activation": model.activation,
        "theta": model.theta.tolist(),
        "lora": None,
        "meta": dict(meta or {}),
    }
    if adapter is not None:
        doc["lora"] = {
            "rank": adapter.rank,
            "layers": list(adapter.layers),
            "scale": adapter.scale,
            "A": [a.tolist() for a in adapter.A],
            "B": [b.tolist() for b in adapter.B],
        }
    return doc


def checkpoint_from_dict(doc: dict):
    model = MlpParams(tuple(doc["arch"]), np.asarray(doc["theta"], dtype=np.float64), doc["activation"])
    adapter = None
    lo = doc.get("lora")
    if lo:
        adapter = LoraAdapter(
            int(lo["rank"]),
            tuple(lo["layers"]),
            [np.asarray(a, dtype=np.float64) for a in lo["A"]],
            [np.asarray(b, dtype=np.float64) for b in lo["B"]],
            float(lo["scale"]),
        )
    return model, adapter, doc.get("meta", {})


def save_checkpoint(path, model, adapter=None, meta=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(checkpoint_dict(model, adapter, meta), sort_keys=True))
    return path


def load_checkpoint(path):
    return checkpoint_from_dict(json.loads(Path(path).read_text()))

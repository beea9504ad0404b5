"""Conditional flow-matching and gradual fine-tuning losses.

Both losses are reported without the conventional 1/2 factor; it only
rescales the learning rate.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .coupling import CoupledBatch
from .model import LoraAdapter, MlpParams, NonFiniteError, forward, loss_and_grad
from .rng import make_rng

Field = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "cfm"
    beta: float = 0.0
    sigma: float = 0.0
    time_sampling: str = "uniform"

    def __post_init__(self):
        if self.kind not in ("cfm", "gft"):
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.time_sampling != "uniform":
            raise ValueError("only uniform time sampling is supported")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta": self.beta, "sigma": self.sigma, "time_sampling": self.time_sampling}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveSpec":
        return cls(**d)


def noise_envelope(t):
    return np.sqrt(np.clip(t * (1.0 - t), 0.0, None))


def conditional_target_u(x0, x1, t, sigma: float = 0.0, noise=None):
    """Point on the straight path from x0 to x1 at time t, and its velocity.

    For ``sigma > 0`` the point is perturbed by ``sigma * sqrt(t(1-t)) * noise``
    (``noise`` standard normal, same shape as x0), which pins both endpoints.
    """
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    tt = t[..., None] if t.ndim and x0.ndim > 1 else t
    xt = (1.0 - tt) * x0 + tt * x1
    if sigma > 0:
        if noise is None:
            raise ValueError("sigma > 0 needs a noise draw")
        xt = xt + sigma * noise_envelope(tt) * noise
    return xt, x1 - x0


def sample_conditional_path(batch: CoupledBatch, seed, sigma: float = 0.0):
    """Draw one t ~ U[0, 1] per row and the matching (x_t, u)."""
    rng = make_rng(seed)
    n, d = batch.x0.shape
    t = rng.random(n)
    noise = rng.standard_normal((n, d)) if sigma > 0 else None
    xt, u = conditional_target_u(batch.x0, batch.x1, t, sigma, noise)
    return t, xt, u


def _check_output(v):
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("non-finite model output")


def cfm_objective(u: np.ndarray, weights: np.ndarray | None = None):
    """Closure v -> (mean |v - u|^2, gradient).

    ``weights`` replaces the uniform 1/n row weights (quadrature use).
    """
    n = u.shape[0]

    def objective(v):
        _check_output(v)
        r = v - u
        if weights is None:
            return float(np.mean(np.sum(r * r, axis=1))), 2.0 * r / n
        return float(weights @ np.sum(r * r, axis=1)), 2.0 * r * weights[:, None]

    return objective


def gft_objective(u: np.ndarray, v_base: np.ndarray, beta: float, weights: np.ndarray | None = None):
    """Closure v -> (mean |v - u|^2 + beta |v - v_base|^2, gradient)."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    n = u.shape[0]

    def objective(v):
        _check_output(v)
        r = v - u
        s = v - v_base
        per_row = np.sum(r * r, axis=1) + beta * np.sum(s * s, axis=1)
        if weights is None:
            return float(np.mean(per_row)), 2.0 * (r + beta * s) / n
        return float(weights @ per_row), 2.0 * (r + beta * s) * weights[:, None]

    return objective


def _base_values(base_model, xt, t):
    if isinstance(base_model, MlpParams):
        return forward(base_model, xt, t)
    return np.asarray(base_model(xt, t), dtype=float)


def cfm_loss_and_grad(model: MlpParams, batch: CoupledBatch, seed, sigma: float = 0.0,
                      adapter: LoraAdapter | None = None):
    if len(batch) == 0:
        raise ValueError("empty batch")
    t, xt, u = sample_conditional_path(batch, seed, sigma)
    return loss_and_grad(model, xt, t, cfm_objective(u), adapter)


def gft_loss_and_grad(model: MlpParams, base_model, batch: CoupledBatch, beta: float, seed,
                      sigma: float = 0.0, adapter: LoraAdapter | None = None):
    """GFT loss and its gradient; ``base_model`` is any frozen field.

    The base field is evaluated at the same (x_t, t) draws as the data term
    and never differentiated.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    t, xt, u = sample_conditional_path(batch, seed, sigma)
    v_base = _base_values(base_model, xt, t)
    return loss_and_grad(model, xt, t, gft_objective(u, v_base, beta), adapter)


def cfm_loss(model, batch: CoupledBatch, seed, sigma: float = 0.0, adapter=None) -> float:
    t, xt, u = sample_conditional_path(batch, seed, sigma)
    return cfm_objective(u)(_evaluate(model, xt, t, adapter))[0]


def gft_loss(model, base_model, batch: CoupledBatch, beta: float, seed, sigma: float = 0.0,
             adapter=None) -> float:
    t, xt, u = sample_conditional_path(batch, seed, sigma)
    v_base = _base_values(base_model, xt, t)
    return gft_objective(u, v_base, beta)(_evaluate(model, xt, t, adapter))[0]


def _evaluate(model, xt, t, adapter):
    if isinstance(model, MlpParams):
        return forward(model, xt, t, adapter)
    return np.asarray(model(xt, t), dtype=float)


def optimal_drift(v_q, v_base, beta: float):
    """Pointwise minimiser of |v - v_q|^2 + beta |v - v_base|^2."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    w_q = 1.0 / (1.0 + beta)
    w_b = beta / (1.0 + beta)
    return w_q * np.asarray(v_q, dtype=float) + w_b * np.asarray(v_base, dtype=float)

"""Synthetic source/target laws with seeded sampling and analytic densities.

Gaussians carry diagonal covariances only. Two-moons and checkerboard have
no density here; they are sample-only testbeds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import logsumexp

from .rng import make_rng

KINDS = ("gaussian", "gaussian_mixture", "two_moons", "checkerboard")


class UnsupportedKindError(ValueError):
    pass


@dataclass(frozen=True)
class DistributionSpec:
    """A synthetic law on R^dim.

    ``params`` by kind:

    * gaussian: ``mean`` (dim,), ``var`` (dim,) diagonal variances
    * gaussian_mixture: ``means`` (K, dim), ``vars`` (K, dim), ``weights`` (K,)
    * two_moons / checkerboard: ``noise`` (moons only), ``scale``,
      ``rotation`` (radians), ``offset`` (2,)
    """

    kind: str
    dim: int
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        p = self.params
        if self.kind == "gaussian":
            mean = np.asarray(p["mean"], dtype=float)
            var = np.asarray(p["var"], dtype=float)
            if mean.shape != (self.dim,) or var.shape != (self.dim,):
                raise ValueError("gaussian mean/var must have shape (dim,)")
            if not np.all(var > 0):
                raise ValueError("variances must be strictly positive")
        elif self.kind == "gaussian_mixture":
            means = np.asarray(p["means"], dtype=float)
            vars_ = np.asarray(p["vars"], dtype=float)
            w = np.asarray(p["weights"], dtype=float)
            k = w.shape[0]
            if means.shape != (k, self.dim) or vars_.shape != (k, self.dim):
                raise ValueError("mixture means/vars must have shape (K, dim)")
            if not np.all(vars_ > 0):
                raise ValueError("variances must be strictly positive")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("mixture weights must be a probability vector")
        else:
            if self.dim != 2:
                raise ValueError(f"{self.kind} is defined in 2-D only")
            if p.get("scale", 1.0) <= 0:
                raise ValueError("scale must be positive")
            if p.get("noise", 0.0) < 0:
                raise ValueError("noise must be nonnegative")
            if np.asarray(p.get("offset", (0.0, 0.0))).shape != (2,):
                raise ValueError("offset must have shape (2,)")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "params": _jsonable(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "DistributionSpec":
        return cls(kind=d["kind"], dim=int(d["dim"]), params=_jsonable(d.get("params", {})))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


# -- constructors -----------------------------------------------------------

def gaussian(mean, var) -> DistributionSpec:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    var = np.broadcast_to(np.asarray(var, dtype=float), mean.shape)
    return DistributionSpec("gaussian", mean.size, {"mean": mean.tolist(), "var": var.tolist()})


def gaussian_mixture(means, vars, weights) -> DistributionSpec:
    means = np.atleast_2d(np.asarray(means, dtype=float))
    vars_ = np.broadcast_to(np.asarray(vars, dtype=float), means.shape)
    return DistributionSpec(
        "gaussian_mixture",
        means.shape[1],
        {"means": means.tolist(), "vars": vars_.tolist(), "weights": list(map(float, weights))},
    )


def eight_gaussians(radius: float = 2.0, var: float = 0.02) -> DistributionSpec:
    angles = 2 * np.pi * np.arange(8) / 8
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return gaussian_mixture(means, var, np.full(8, 1 / 8))


def two_moons(noise: float = 0.1, scale: float = 1.0, rotation: float = 0.0, offset=(0.0, 0.0)) -> DistributionSpec:
    return DistributionSpec(
        "two_moons", 2, {"noise": noise, "scale": scale, "rotation": rotation, "offset": list(offset)}
    )


def checkerboard(scale: float = 1.0, rotation: float = 0.0, offset=(0.0, 0.0)) -> DistributionSpec:
    return DistributionSpec("checkerboard", 2, {"scale": scale, "rotation": rotation, "offset": list(offset)})


# -- sampling ---------------------------------------------------------------

def sample(spec: DistributionSpec, n: int, seed) -> np.ndarray:
    """Draw ``n`` i.i.d. rows. Same seed, same output."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed)
    p = spec.params
    if spec.kind == "gaussian":
        z = rng.standard_normal((n, spec.dim))
        return np.asarray(p["mean"]) + np.sqrt(np.asarray(p["var"])) * z
    if spec.kind == "gaussian_mixture":
        # normals first, component labels second: a one-hot mixture then
        # reproduces the plain gaussian stream for the same seed
        z = rng.standard_normal((n, spec.dim))
        w = np.asarray(p["weights"], dtype=float)
        u = rng.random(n)
        comp = np.searchsorted(np.cumsum(w), u, side="right")
        comp = np.minimum(comp, len(w) - 1)
        # skip zero-weight components that searchsorted can land on at float edges
        comp = np.where(w[comp] > 0, comp, np.argmax(w))
        means = np.asarray(p["means"])
        sds = np.sqrt(np.asarray(p["vars"]))
        return means[comp] + sds[comp] * z
    if spec.kind == "two_moons":
        # radius-1 half circles; upper one centred at the origin, lower one
        # shifted by (1, -0.5), then the pair is re-centred on (0.5, 0.25)
        theta = np.pi * rng.random(n)
        upper = rng.random(n) < 0.5
        x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
        y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
        pts = np.stack([x - 0.5, y - 0.25], axis=1)
        pts = pts + p.get("noise", 0.1) * rng.standard_normal((n, 2))
        return _place(pts, p)
    # checkerboard: 4x4 cells on [-2, 2]^2, cells with (i + j) even are filled
    cells = np.array([(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0])
    pick = rng.integers(0, len(cells), n)
    pts = cells[pick] + rng.random((n, 2)) - 2.0
    return _place(pts, p)


def _place(pts: np.ndarray, p: dict) -> np.ndarray:
    a = p.get("rotation", 0.0)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return p.get("scale", 1.0) * pts @ rot.T + np.asarray(p.get("offset", (0.0, 0.0)))


# -- densities --------------------------------------------------------------

def _components(spec: DistributionSpec):
    p = spec.params
    if spec.kind == "gaussian":
        return (np.asarray(p["mean"], dtype=float)[None], np.asarray(p["var"], dtype=float)[None],
                np.ones(1))
    if spec.kind == "gaussian_mixture":
        return (np.asarray(p["means"], dtype=float), np.asarray(p["vars"], dtype=float),
                np.asarray(p["weights"], dtype=float))
    raise UnsupportedKindError(f"no analytic density for kind {spec.kind!r}")


def _component_logpdf(spec, x):
    means, vars_, w = _components(spec)
    x = np.asarray(x, dtype=float)
    diff = x[..., None, :] - means
    logp = -0.5 * np.sum(diff**2 / vars_ + np.log(2 * np.pi * vars_), axis=-1)
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    return logp + logw, diff, vars_


def log_density(spec: DistributionSpec, x) -> np.ndarray | float:
    """Exact log-density; ``x`` may be one point (dim,) or a batch (n, dim)."""
    comp, _, _ = _component_logpdf(spec, x)
    out = logsumexp(comp, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def score(spec: DistributionSpec, x) -> np.ndarray:
    """Gradient of log_density with respect to x."""
    comp, diff, vars_ = _component_logpdf(spec, x)
    resp = np.exp(comp - logsumexp(comp, axis=-1, keepdims=True))
    return -np.sum(resp[..., None] * diff / vars_, axis=-2)


# -- shifts -----------------------------------------------------------------

@dataclass(frozen=True)
class ShiftSpec:
    """How the fine-tuning target departs from the pretraining target.

    Magnitude is the knob: a small translation gives an in-domain style
    shift, a large one a cross-domain style shift.
    """

    translation: tuple[float, ...] | None = None
    var_scale: float = 1.0
    weight_factors: tuple[float, ...] | None = None
    rotation: float = 0.0


def make_shift_pair(base: DistributionSpec, shift: ShiftSpec) -> tuple[DistributionSpec, DistributionSpec]:
    if shift.var_scale <= 0:
        raise ValueError("variance scale must be positive")
    delta = np.zeros(base.dim) if shift.translation is None else np.asarray(shift.translation, dtype=float)
    if delta.shape != (base.dim,):
        raise ValueError("translation must have shape (dim,)")
    p = dict(base.params)
    if base.kind == "gaussian":
        if shift.rotation or shift.weight_factors is not None:
            raise ValueError("gaussian shifts support translation and variance scaling only")
        p["mean"] = (np.asarray(p["mean"]) + delta).tolist()
        p["var"] = (np.asarray(p["var"]) * shift.var_scale).tolist()
    elif base.kind == "gaussian_mixture":
        if shift.rotation:
            raise ValueError("rotation is not supported for gaussian mixtures")
        p["means"] = (np.asarray(p["means"]) + delta).tolist()
        p["vars"] = (np.asarray(p["vars"]) * shift.var_scale).tolist()
        if shift.weight_factors is not None:
            w = np.asarray(p["weights"]) * np.asarray(shift.weight_factors, dtype=float)
            if np.any(w < 0) or w.sum() <= 0:
                raise ValueError("weight factors must keep a valid probability vector")
            p["weights"] = (w / w.sum()).tolist()
    else:
        if shift.weight_factors is not None:
            raise ValueError(f"{base.kind} has no mixture weights")
        sd_scale = math.sqrt(shift.var_scale)
        p["scale"] = p.get("scale", 1.0) * sd_scale
        if "noise" in p:
            p["noise"] = p["noise"] * sd_scale
        p["rotation"] = p.get("rotation", 0.0) + shift.rotation
        p["offset"] = (np.asarray(p.get("offset", (0.0, 0.0))) + delta).tolist()
    return base, DistributionSpec(base.kind, base.dim, p)

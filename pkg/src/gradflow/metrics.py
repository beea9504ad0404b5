"""Sample-quality, path-measure divergence and convergence-stability metrics."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .model import MlpParams, param_jacobian
from .rng import make_rng
from .samplers import Trajectory

log = logging.getLogger(__name__)

MAX_FISHER_PARAMS = 20_000
COV_EPS = 1e-9


# -- Frechet distance -------------------------------------------------------

@dataclass(frozen=True)
class FrechetResult:
    value: float
    regularized: bool


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> FrechetResult:
    """|mu_a - mu_b|^2 + tr(C_a + C_b - 2 (C_a^1/2 C_b C_a^1/2)^1/2)."""
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    regularized = False
    eye = np.eye(cov_a.shape[0])
    if np.linalg.eigvalsh(cov_a).min() <= 0 or np.linalg.eigvalsh(cov_b).min() <= 0:
        cov_a = cov_a + COV_EPS * eye
        cov_b = cov_b + COV_EPS * eye
        regularized = True
    root_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(root_a @ cov_b @ root_a)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return FrechetResult(max(value, 0.0), regularized)


def frechet_gaussian_distance(samples_a, samples_b, full: bool = False):
    """Frechet distance between Gaussians fitted to two sample sets.

    Degenerate covariances get ``1e-9 * I`` added; ``full=True`` returns a
    FrechetResult that records whether that happened.
    """
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets differ in dimension")
    d = a.shape[1]
    if a.shape[0] < d + 1 or b.shape[0] < d + 1:
        raise ValueError(f"need at least {d + 1} samples per side")
    res = frechet_from_moments(
        a.mean(axis=0), np.cov(a, rowvar=False), b.mean(axis=0), np.cov(b, rowvar=False)
    )
    if res.regularized:
        log.warning("degenerate covariance, regularised with %g*I", COV_EPS)
    return res if full else res.value


# -- path-measure KL --------------------------------------------------------

def _as_list(trajectories) -> list[Trajectory]:
    if isinstance(trajectories, Trajectory):
        return [trajectories]
    return list(trajectories)


def girsanov_kl_per_path(f: Callable, g: Callable, sigma: float, trajectories) -> np.ndarray:
    """Per-path values of 1/2 int |(f - g)/sigma|^2 dt, left-endpoint rule."""
    if sigma <= 0:
        raise ValueError("Girsanov KL needs sigma > 0")
    out = []
    for traj in _as_list(trajectories):
        acc = 0.0
        for i in range(traj.n_steps):
            x, t = traj.states[i], traj.times[i]
            dt = traj.times[i + 1] - t
            diff = (np.asarray(f(x, t)) - np.asarray(g(x, t))) / sigma
            acc = acc + 0.5 * np.sum(diff * diff, axis=-1) * dt
        out.append(np.atleast_1d(acc))
    return np.concatenate(out)


def girsanov_kl_mc(f: Callable, g: Callable, sigma: float, trajectories, return_stderr: bool = False):
    """Monte-Carlo KL(P_f || P_g) from paths simulated under drift ``f``.

    Trajectories may be a list, or a batched Trajectory whose states are
    (N+1, n, dim); each row is one path.
    """
    vals = girsanov_kl_per_path(f, g, sigma, trajectories)
    mean = float(np.mean(vals))
    if return_stderr:
        return mean, float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return mean


# -- Fisher quadratic -------------------------------------------------------

@dataclass(frozen=True)
class FisherMatrix:
    matrix: np.ndarray
    n_mc: int

    @property
    def dim_params(self) -> int:
        return self.matrix.shape[0]


def _n_params(model) -> int:
    if isinstance(model, MlpParams):
        return model.theta.size
    return np.asarray(model.theta).size


def fisher_matrix(base_model, trajectories, n_mc: int, seed=0) -> FisherMatrix:
    """Monte-Carlo E[J^T J] with J the parameter Jacobian of the field.

    Each draw picks a path uniformly and a left-endpoint grid time
    uniformly, i.e. tau ~ U[0, 1] on the trajectory's grid.
    """
    p = _n_params(base_model)
    if p > MAX_FISHER_PARAMS:
        raise ValueError(f"{p} parameters exceeds the dense Fisher limit {MAX_FISHER_PARAMS}")
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    trajs = _as_list(trajectories)
    rng = make_rng(seed)
    # flatten every path into (time index, state) pools
    pools = []
    for traj in trajs:
        s = traj.states if traj.states.ndim == 3 else traj.states[:, None, :]
        pools.append((traj.times, s))
    sizes = np.array([s.shape[1] for _, s in pools])
    which = rng.choice(sizes.sum(), size=n_mc)
    step_idx = rng.integers(0, np.array([len(tm) - 1 for tm, _ in pools]).min(), size=n_mc)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    xs, ts = [], []
    for w, k in zip(which, step_idx):
        j = np.searchsorted(offsets, w, side="right") - 1
        times, states = pools[j]
        xs.append(states[k, w - offsets[j]])
        ts.append(times[k])
    xs = np.asarray(xs)
    ts = np.asarray(ts)
    if isinstance(base_model, MlpParams):
        jac = param_jacobian(base_model, xs, ts)
    else:
        jac = base_model.param_jacobian(xs, ts)
    f = np.einsum("nkp,nkq->pq", jac, jac) / n_mc
    return FisherMatrix((f + f.T) / 2, n_mc)


def fisher_kl_quadratic(fisher: FisherMatrix, delta_theta) -> float:
    dth = np.asarray(delta_theta, dtype=float)
    if dth.shape != (fisher.dim_params,):
        raise ValueError("delta_theta length does not match the Fisher matrix")
    return float(0.5 * dth @ fisher.matrix @ dth)


# -- convergence stability --------------------------------------------------

@dataclass(frozen=True)
class MetricsSeries:
    epochs: tuple
    values: tuple

    def __post_init__(self):
        e = np.asarray(self.epochs, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if e.shape != v.shape or e.ndim != 1:
            raise ValueError("epochs and values must be equal-length 1-D sequences")
        if np.any(np.diff(e) <= 0):
            raise ValueError("epochs must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise ValueError("values must be finite")
        object.__setattr__(self, "epochs", tuple(e.tolist()))
        object.__setattr__(self, "values", tuple(v.tolist()))

    def __len__(self):
        return len(self.values)

    @classmethod
    def of(cls, epochs: Sequence, values: Sequence) -> "MetricsSeries":
        return cls(tuple(epochs), tuple(values))


def _windows(series: MetricsSeries, window: int, stride: int = 1):
    if window < 2:
        raise ValueError("window must be >= 2")
    if window > len(series):
        raise ValueError(f"window {window} longer than series ({len(series)})")
    e = np.asarray(series.epochs)
    v = np.asarray(series.values)
    for start in range(0, len(series) - window + 1, stride):
        yield e[start:start + window], v[start:start + window]


def instantaneous_variance(series: MetricsSeries, window: int = 10, bandwidth: float | None = None,
                           stride: int = 1) -> float:
    """Average of RBF-weighted local variances over sliding windows.

    Weights are exp(-(e - c)^2 / (2 h^2)) around the window's centre epoch
    c. The default h is half the window's epoch span. Mean and variance use
    the same weights.
    """
    local = []
    for e, v in _windows(series, window, stride):
        h = 0.5 * (e[-1] - e[0]) if bandwidth is None else bandwidth
        centre = 0.5 * (e[0] + e[-1])
        if math.isinf(h):
            w = np.ones_like(e)
        else:
            w = np.exp(-((e - centre) ** 2) / (2.0 * h * h))
        w = w / w.sum()
        # shift first so a constant window gives exactly 0
        v = v - v[0]
        mu = np.sum(w * v)
        local.append(np.sum(w * (v - mu) ** 2))
    return float(np.mean(local))


def convergence_rate(series: MetricsSeries, window: int = 10, stride: int = 1) -> float:
    """Mean |OLS slope| of value against epoch over sliding windows."""
    slopes = []
    for e, v in _windows(series, window, stride):
        ec = e - e.mean()
        sxx = np.sum(ec * ec)
        if sxx == 0:
            raise ValueError("degenerate window: all epochs equal")
        slopes.append(abs(np.sum(ec * (v - v.mean())) / sxx))
    return float(np.mean(slopes))


def spearman_rho(series: MetricsSeries) -> float:
    """Rank correlation between epoch and value, average ranks for ties.

    A constant series has no rank variance; that case returns 0 and warns.
    """
    if len(series) < 3:
        raise ValueError("need at least 3 points")
    re = rankdata(series.epochs)
    rv = rankdata(series.values)
    re = re - re.mean()
    rv = rv - rv.mean()
    denom = math.sqrt(np.sum(re * re) * np.sum(rv * rv))
    if denom == 0:
        warnings.warn("zero rank variance; Spearman rho set to 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.clip(np.sum(re * rv) / denom, -1.0, 1.0))


def stability_summary(series: MetricsSeries, window: int = 10) -> dict:
    return {
        "inst_variance": instantaneous_variance(series, window),
        "convergence_rate": convergence_rate(series, window),
        "spearman_rho": spearman_rho(series),
    }

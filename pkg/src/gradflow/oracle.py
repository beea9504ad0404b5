"""Closed-form Gaussian flows used as ground truth for the GFT theory.

With isotropic Gaussian endpoints, independent coupling and straight
interpolation paths, the marginal density and vector field at every time
are known exactly. That is enough to check the convex-combination optimum,
its beta limits, and the geometric-mean terminal law.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .coupling import independent_coupling
from .model import AdamHyper, AdamState, MlpParams, adam_step, forward, mlp_init
from .objectives import (
    cfm_loss_and_grad,
    gft_loss_and_grad,
    gft_objective,
    noise_envelope,
    optimal_drift,
)
from .model import loss_and_grad
from .rng import make_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GaussianPath:
    """Straight-line path between N(m0, s0^2 I) and N(m1, s1^2 I), independent coupling."""

    m0: tuple
    m1: tuple
    s0: float = 1.0
    s1: float = 1.0

    def __post_init__(self):
        m0 = tuple(float(a) for a in np.atleast_1d(self.m0))
        m1 = tuple(float(a) for a in np.atleast_1d(self.m1))
        if len(m0) != len(m1):
            raise ValueError("endpoint means differ in dimension")
        if self.s0 <= 0 or self.s1 <= 0:
            raise ValueError("endpoint stds must be positive")
        object.__setattr__(self, "m0", m0)
        object.__setattr__(self, "m1", m1)

    @property
    def dim(self) -> int:
        return len(self.m0)

    def mean(self, t):
        t = np.asarray(t, dtype=float)[..., None]
        return (1.0 - t) * np.asarray(self.m0) + t * np.asarray(self.m1)

    def var(self, t):
        t = np.asarray(t, dtype=float)
        return (1.0 - t) ** 2 * self.s0**2 + t**2 * self.s1**2

    def sample_endpoints(self, n: int, seed):
        rng = make_rng(seed)
        x0 = np.asarray(self.m0) + self.s0 * rng.standard_normal((n, self.dim))
        x1 = np.asarray(self.m1) + self.s1 * rng.standard_normal((n, self.dim))
        return x0, x1

    def density(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        var = self.var(t)
        sq = np.sum((x - self.mean(t)) ** 2, axis=-1)
        return np.exp(-0.5 * sq / var) / (2 * np.pi * var) ** (self.dim / 2)

    def score(self, x, t):
        return -(np.asarray(x, dtype=float) - self.mean(t)) / np.asarray(self.var(t))[..., None]

    def field(self, x, t):
        return gaussian_marginal_field(self, x, t)


def gaussian_marginal_field(path: GaussianPath, x, t):
    """v(x, t) = (m1 - m0) + (t s1^2 - (1-t) s0^2) / sigma_t^2 * (x - mu_t)."""
    t_arr = np.asarray(t, dtype=float)
    if np.any((t_arr < 0) | (t_arr > 1)):
        raise ValueError("t must lie in [0, 1]")
    coef = (t_arr * path.s1**2 - (1.0 - t_arr) * path.s0**2) / path.var(t_arr)
    x = np.asarray(x, dtype=float)
    drift = np.asarray(path.m1) - np.asarray(path.m0)
    return drift + np.asarray(coef)[..., None] * (x - path.mean(t_arr))


def continuity_residual(path: GaussianPath, xs, t: float, h: float = 1e-4):
    """Finite-difference d_t p + d_x (p v) on a 1-D grid, and the scale of d_t p."""
    if path.dim != 1:
        raise ValueError("continuity check is 1-D")
    xs = np.asarray(xs, dtype=float)[:, None]
    dp_dt = (path.density(xs, t + h) - path.density(xs, t - h)) / (2 * h)
    flux = lambda x: path.density(x, t) * gaussian_marginal_field(path, x, t)[:, 0]
    dflux = (flux(xs + h) - flux(xs - h)) / (2 * h)
    return dp_dt + dflux, float(np.max(np.abs(dp_dt)))


def geometric_tilt_gaussian(p_base, q, beta: float):
    """Normalised q^(1/(1+beta)) * p_base^(beta/(1+beta)) for Gaussians.

    ``p_base`` and ``q`` are (mean, variance) pairs (scalars or diagonal
    vectors). Precisions mix with weights 1/(1+beta) and beta/(1+beta).
    """
    mu0, var0 = (np.asarray(a, dtype=float) for a in p_base)
    mu1, var1 = (np.asarray(a, dtype=float) for a in q)
    if np.any(var0 <= 0) or np.any(var1 <= 0):
        raise ValueError("variances must be positive")
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    w_q = 1.0 / (1.0 + beta)
    w_b = beta / (1.0 + beta)
    lam0, lam1 = 1.0 / var0, 1.0 / var1
    lam = w_q * lam1 + w_b * lam0
    mu = (w_q * lam1 * mu1 + w_b * lam0 * mu0) / lam
    if mu.ndim == 0:
        return float(mu), float(1.0 / lam)
    return mu, 1.0 / lam


# -- convex-combination recovery -------------------------------------------

@dataclass(frozen=True)
class ProbeGrid:
    """Times in [t_lo, t_hi]; at each, points mu_t +/- width * sigma_t per axis."""

    n_times: int = 21
    n_points: int = 41
    width: float = 2.0
    t_lo: float = 0.0
    t_hi: float = 1.0

    def points(self, path: GaussianPath):
        xs, ts = [], []
        offsets = np.linspace(-self.width, self.width, self.n_points)
        for t in np.linspace(self.t_lo, self.t_hi, self.n_times):
            mu = path.mean(t)
            sd = math.sqrt(path.var(t))
            for k in range(path.dim):
                pts = np.repeat(mu[None], self.n_points, axis=0)
                pts[:, k] += offsets * sd
                xs.append(pts)
                ts.append(np.full(self.n_points, t))
        return np.concatenate(xs), np.concatenate(ts)


@dataclass
class MixtureReport:
    beta: float
    probe_grid_spec: dict
    sup_rel_err: float
    mean_rel_err: float
    pretrain_residual: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def relative_errors(v, v_ref) -> tuple[float, float]:
    """(sup, mean) error normalised by the reference field's own magnitude.

    Pointwise ratios blow up where the reference field crosses zero, so both
    numerator and denominator are aggregated over the grid first.
    """
    err = np.linalg.norm(np.atleast_2d(v - v_ref), axis=-1)
    mag = np.linalg.norm(np.atleast_2d(v_ref), axis=-1)
    return float(err.max() / mag.max()), float(err.mean() / mag.mean())


def verify_mixture_drift(base_path: GaussianPath, target_path: GaussianPath, beta: float, trained_model,
                    base_model=None, probe: ProbeGrid = ProbeGrid()) -> MixtureReport:
    """Compare a GFT-trained field with the analytic convex combination.

    The probe grid covers the target path's marginals, where the fine-tuning
    loss places its mass. ``pretrain_residual`` is the mean relative error
    of ``base_model`` against the analytic base field on the same grid
    (0 when the analytic field itself served as the base).
    """
    xs, ts = probe.points(target_path)
    v_star = optimal_drift(
        gaussian_marginal_field(target_path, xs, ts), gaussian_marginal_field(base_path, xs, ts), beta
    )
    v = _eval(trained_model, xs, ts)
    sup, mean = relative_errors(v, v_star)
    residual = 0.0
    extra = {}
    if base_model is not None and not _is_analytic(base_model, base_path):
        vb = _eval(base_model, xs, ts)
        residual = relative_errors(vb, gaussian_marginal_field(base_path, xs, ts))[1]
        # optimum relative to the base actually used
        v_star_model = optimal_drift(gaussian_marginal_field(target_path, xs, ts), vb, beta)
        extra["sup_rel_err_vs_model_base"], extra["mean_rel_err_vs_model_base"] = relative_errors(v, v_star_model)
    return MixtureReport(float(beta), asdict(probe), sup, mean, residual, extra)


def _is_analytic(model, path):
    return getattr(model, "__self__", None) is path


def _eval(model, xs, ts):
    if isinstance(model, MlpParams):
        return forward(model, xs, ts)
    return np.asarray(model(xs, ts), dtype=float)


def train_on_path(path: GaussianPath, steps: int, seed=0, base_model=None, beta: float = 0.0,
                  init: MlpParams | None = None, arch=None, activation: str = "silu",
                  batch_size: int = 256, lr: float = 3e-3, final_lr: float = 1e-4,
                  plateau_window: int = 200, plateau_tol: float = 1e-3):
    """Fit an MLP by CFM (no base) or GFT (with base) on one Gaussian path.

    Learning rate decays geometrically from ``lr`` to ``final_lr``. Returns
    (model, info) with info['plateau'] set once the mean loss over the last
    ``plateau_window`` steps moved by less than ``plateau_tol`` relative to
    the window before it.
    """
    arch = arch or (path.dim + 1, 64, 64, path.dim)
    model = init if init is not None else mlp_init(arch, activation, seed=(seed, 1))
    state = AdamState.zeros(model.theta.size)
    losses = []
    plateau_step = None
    for step in range(steps):
        x0, x1 = path.sample_endpoints(batch_size, (seed, 2, step))
        batch = independent_coupling(x0, x1, (seed, 3, step))
        if base_model is None:
            loss, grad = cfm_loss_and_grad(model, batch, (seed, 4, step))
        else:
            loss, grad = gft_loss_and_grad(model, base_model, batch, beta, (seed, 4, step))
        cur_lr = lr * (final_lr / lr) ** (step / max(steps - 1, 1))
        theta, state = adam_step(model.theta, grad, state, AdamHyper(lr=cur_lr))
        model = model.with_theta(theta)
        losses.append(loss)
        if plateau_step is None and len(losses) >= 2 * plateau_window:
            recent = np.mean(losses[-plateau_window:])
            prev = np.mean(losses[-2 * plateau_window:-plateau_window])
            if abs(recent - prev) <= plateau_tol * abs(prev):
                plateau_step = step + 1
    info = {"steps": steps, "plateau_step": plateau_step, "final_loss": float(np.mean(losses[-plateau_window:]))}
    return model, info


def run_mixture_check(base_path: GaussianPath, target_path: GaussianPath, beta: float, steps: int = 5000,
                       seed=0, base: str = "analytic", pretrain_steps: int = 5000,
                       probe: ProbeGrid = ProbeGrid()) -> MixtureReport:
    """Train at fixed beta against an analytic or pretrained base; report errors."""
    if base == "analytic":
        base_model = base_path.field
        info = {}
    elif base == "pretrain":
        base_model, info = train_on_path(base_path, pretrain_steps, seed=(seed, 10))
    else:
        raise ValueError("base must be 'analytic' or 'pretrain'")
    model, fit = train_on_path(target_path, steps, seed=(seed, 20), base_model=base_model, beta=beta)
    report = verify_mixture_drift(base_path, target_path, beta, model, base_model, probe)
    report.extra.update({"base": base, "finetune": fit, "pretrain": info})
    return report


# -- gradient equivalence under couplings -----------------------------------

def coupling_gradient_check(model: MlpParams, base_model, x0s, x1s, plan, beta: float, sigma: float,
                            n_time: int = 6, n_hermite: int = 60, x_lim: float = 8.0, n_grid: int = 4001):
    """Gradients of the coupling-conditioned and marginal GFT losses, 1-D.

    The conditional loss averages over pairs (i, j) with weight plan[i, j],
    x_t ~ N((1-t) x0_i + t x1_j, (sigma g(t))^2) by Gauss-Hermite
    quadrature, against u_ij = x1_j - x0_i. The marginal loss integrates the
    mixture density on a uniform x grid against the marginal field
    E[u | x_t]. Time uses Gauss-Legendre nodes on [0, 1] for both.
    """
    x0s = np.asarray(x0s, dtype=float).ravel()
    x1s = np.asarray(x1s, dtype=float).ravel()
    plan = np.asarray(plan, dtype=float)
    if sigma <= 0:
        raise ValueError("sigma must be positive for the quadrature check")
    tn, tw = np.polynomial.legendre.leggauss(n_time)
    tn, tw = 0.5 * (tn + 1.0), 0.5 * tw
    hn, hw = np.polynomial.hermite_e.hermegauss(n_hermite)
    hw = hw / hw.sum()
    ii, jj = np.nonzero(plan > 0)
    pw = plan[ii, jj]
    u_pairs = x1s[jj] - x0s[ii]

    # conditional: one quadrature point per (time, pair, hermite node)
    xs, ts, us, ws = [], [], [], []
    for t, w_t in zip(tn, tw):
        centre = (1 - t) * x0s[ii] + t * x1s[jj]
        sd = sigma * noise_envelope(t)
        xs.append((centre[:, None] + sd * hn[None, :]).ravel())
        ts.append(np.full(centre.size * hn.size, t))
        us.append(np.repeat(u_pairs, hn.size))
        ws.append(w_t * (pw[:, None] * hw[None, :]).ravel())
    grad_cond = _weighted_grad(model, base_model, xs, ts, us, ws, beta)

    # marginal: mixture density and its conditional-mean field on a grid
    grid = np.linspace(-x_lim, x_lim, n_grid)
    trap = np.full(n_grid, grid[1] - grid[0])
    trap[[0, -1]] *= 0.5
    xs, ts, us, ws = [], [], [], []
    for t, w_t in zip(tn, tw):
        centre = (1 - t) * x0s[ii] + t * x1s[jj]
        sd = sigma * noise_envelope(t)
        dens = pw[None, :] * np.exp(-0.5 * ((grid[:, None] - centre[None, :]) / sd) ** 2) / (
            sd * math.sqrt(2 * math.pi)
        )
        p_t = dens.sum(axis=1)
        safe = np.where(p_t > 0, p_t, 1.0)
        v_q = (dens @ u_pairs) / safe
        xs.append(grid)
        ts.append(np.full(n_grid, t))
        us.append(v_q)
        ws.append(w_t * trap * p_t)
    grad_marg = _weighted_grad(model, base_model, xs, ts, us, ws, beta)
    return grad_cond, grad_marg


def _weighted_grad(model, base_model, xs, ts, us, ws, beta):
    x = np.concatenate(xs)[:, None]
    t = np.concatenate(ts)
    u = np.concatenate(us)[:, None]
    w = np.concatenate(ws)
    vb = _eval(base_model, x, t)
    _, grad = loss_and_grad(model, x, t, gft_objective(u, vb, beta, weights=w))
    return grad

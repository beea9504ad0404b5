"""Fixed-grid integrators for the learned dynamics.

Fields are callables ``field(x, t) -> v`` acting on a batch ``x`` of shape
(n, dim) at a scalar time ``t``. A single start point of shape (dim,) is
accepted too; the trajectory then drops the batch axis.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .rng import make_rng

Field = Callable[[np.ndarray, float], np.ndarray]


class NonFiniteStateError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite state at step {step}")
        self.step = step


@dataclass
class Trajectory:
    """times (N+1,), states (N+1, [n,] dim), velocities (N, [n,] dim).

    ``velocities[i]`` is the drift evaluated at the start of step i.
    """

    times: np.ndarray
    states: np.ndarray
    velocities: np.ndarray
    sigma: float = 0.0
    seed: int | None = None

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def to_csv(self, path, index: int | None = None) -> Path:
        """Dump one trajectory as rows ``t, x_0.., v_0..``.

        The last row has no velocity and leaves those columns empty.
        """
        states, vel = self.states, self.velocities
        if states.ndim == 3:
            states, vel = states[:, index or 0], vel[:, index or 0]
        d = states.shape[-1]
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{k}" for k in range(d)] + [f"v_{k}" for k in range(d)])
            for i, t in enumerate(self.times):
                v = [repr(float(a)) for a in vel[i]] if i < len(vel) else [""] * d
                w.writerow([repr(float(t))] + [repr(float(a)) for a in states[i]] + v)
        return path


def time_grid(n_steps: int) -> np.ndarray:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    return np.arange(n_steps + 1) / n_steps


def _integrate(field, x0, n_steps, sigma, noise):
    times = time_grid(n_steps)
    dt = 1.0 / n_steps
    sqdt = math.sqrt(dt)
    x = np.array(x0, dtype=float)
    states = np.empty((n_steps + 1,) + x.shape)
    vels = np.empty((n_steps,) + x.shape)
    states[0] = x
    for i in range(n_steps):
        v = np.asarray(field(x, times[i]), dtype=float)
        vels[i] = v
        if sigma == 0:
            x = x + v * dt
        else:
            x = x + v * dt + sigma * sqdt * noise[i]
        if not np.all(np.isfinite(x)):
            raise NonFiniteStateError(i + 1)
        states[i + 1] = x
    return times, states, vels


def ode_euler(field: Field, x0, n_steps: int) -> Trajectory:
    times, states, vels = _integrate(field, x0, n_steps, 0.0, None)
    return Trajectory(times, states, vels, 0.0, None)


def brownian_increments(shape, n_steps: int, seed) -> np.ndarray:
    """Standard normal draws of shape (n_steps, *shape).

    For a batch each row gets its own stream keyed by (seed, row index),
    so results do not depend on batch composition or evaluation order.
    """
    if len(shape) == 1:
        return make_rng((seed, 0)).standard_normal((n_steps,) + tuple(shape))
    n = shape[0]
    out = np.empty((n_steps,) + tuple(shape))
    for j in range(n):
        out[:, j] = make_rng((seed, j)).standard_normal((n_steps,) + tuple(shape[1:]))
    return out


def sde_euler_maruyama(field: Field, sigma: float, x0, n_steps: int, seed=0) -> Trajectory:
    """x_{i+1} = x_i + f dt + sigma sqrt(dt) xi. With sigma = 0 this is ode_euler."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    x0 = np.asarray(x0, dtype=float)
    noise = None if sigma == 0 else brownian_increments(x0.shape, n_steps, seed)
    times, states, vels = _integrate(field, x0, n_steps, float(sigma), noise)
    return Trajectory(times, states, vels, float(sigma), seed)


def ode_to_sde_drift(v: Field, score: Field, sigma: float) -> Field:
    """Drift with the same marginals as ``v`` under diffusion ``sigma``.

    f = v + sigma^2/2 * score; the divergence-free freedom is fixed at 0.
    """
    half_var = 0.5 * sigma * sigma

    def drift(x, t):
        if half_var == 0:
            return v(x, t)
        return v(x, t) + half_var * score(x, t)

    return drift


def path_length(field: Field, x0_batch, n_steps: int = 100) -> tuple[float, float]:
    """Mean and population std over the batch of sum_i |v(x_i, t_i)|^2 dt.

    Velocities are taken at the left end of each Euler step.
    """
    x0 = np.atleast_2d(np.asarray(x0_batch, dtype=float))
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    traj = ode_euler(field, x0, n_steps)
    per_sample = per_sample_path_length(traj)
    mean = math.fsum(per_sample) / per_sample.size
    var = math.fsum((per_sample - mean) ** 2) / per_sample.size
    return mean, math.sqrt(var)


def per_sample_path_length(traj: Trajectory) -> np.ndarray:
    dt = np.diff(traj.times)
    sq = np.sum(traj.velocities**2, axis=-1)
    dt = dt.reshape((-1,) + (1,) * (sq.ndim - 1))
    return np.sum(sq * dt, axis=0)

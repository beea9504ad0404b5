"""Minibatch couplings between source and target samples."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .rng import make_rng

MAX_EXACT_N = 4096
COUPLING_KINDS = {"independent": "independent", "ot": "ot_exact", "sinkhorn": "ot_sinkhorn"}


@dataclass(frozen=True)
class CoupledBatch:
    x0: np.ndarray
    x1: np.ndarray
    coupling_kind: str
    transport_cost: float
    plan: np.ndarray | None = None

    def __post_init__(self):
        if self.x0.shape != self.x1.shape:
            raise ValueError("x0 and x1 must have identical shapes")

    def __len__(self):
        return self.x0.shape[0]


def sq_cost_matrix(x0s: np.ndarray, x1s: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, C[i, j] = |x1_j - x0_i|^2."""
    c = (
        np.sum(x0s**2, axis=1)[:, None]
        + np.sum(x1s**2, axis=1)[None, :]
        - 2.0 * x0s @ x1s.T
    )
    return np.maximum(c, 0.0)


def pair_cost(x0: np.ndarray, x1: np.ndarray) -> float:
    return float(np.mean(np.sum((x1 - x0) ** 2, axis=1)))


def _check_pair(x0s, x1s):
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    x1s = np.atleast_2d(np.asarray(x1s, dtype=float))
    if x0s.shape[0] != x1s.shape[0]:
        raise ValueError(f"row count mismatch: {x0s.shape[0]} vs {x1s.shape[0]}")
    if x0s.shape[1] != x1s.shape[1]:
        raise ValueError("dimension mismatch between source and target samples")
    return x0s, x1s


def independent_coupling(x0s, x1s, seed=0) -> CoupledBatch:
    """Product coupling: pair rows by index after a seeded shuffle of x1s."""
    x0s, x1s = _check_pair(x0s, x1s)
    perm = make_rng(seed).permutation(x1s.shape[0])
    x1 = x1s[perm]
    return CoupledBatch(x0s, x1, "independent", pair_cost(x0s, x1))


def ot_coupling_exact(x0s, x1s) -> CoupledBatch:
    """Exact squared-Euclidean assignment between two equal-size batches."""
    x0s, x1s = _check_pair(x0s, x1s)
    n = x0s.shape[0]
    if n > MAX_EXACT_N:
        raise ValueError(f"exact OT limited to n <= {MAX_EXACT_N}, got {n}")
    cost = sq_cost_matrix(x0s, x1s)
    rows, cols = linear_sum_assignment(cost)
    x1 = x1s[cols[np.argsort(rows)]]
    return CoupledBatch(x0s, x1, "ot_exact", pair_cost(x0s, x1))


def sinkhorn_plan(cost: np.ndarray, epsilon: float, iters: int, tol: float = 1e-8) -> np.ndarray:
    """Entropic OT plan with uniform marginals, log-domain updates.

    Stops after ``iters`` sweeps or once the row-marginal violation is
    below ``tol``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    n, m = cost.shape
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    k = -cost / epsilon
    f = np.zeros(n)
    g = np.zeros(m)
    for _ in range(iters):
        f = log_a - logsumexp(k + g[None, :], axis=1)
        g = log_b - logsumexp(k + f[:, None], axis=0)
        # columns are exact right after the g update; rows carry the error
        log_p = k + f[:, None] + g[None, :]
        if np.max(np.abs(np.exp(logsumexp(log_p, axis=1)) - 1.0 / n)) < tol:
            break
    return np.exp(k + f[:, None] + g[None, :])


def ot_coupling_sinkhorn(x0s, x1s, epsilon: float, iters: int, seed=0) -> CoupledBatch:
    """Entropic coupling; one target row drawn per source row from the plan."""
    x0s, x1s = _check_pair(x0s, x1s)
    plan = sinkhorn_plan(sq_cost_matrix(x0s, x1s), epsilon, iters)
    cond = plan / plan.sum(axis=1, keepdims=True)
    rng = make_rng(seed)
    u = rng.random(cond.shape[0])
    cdf = np.cumsum(cond, axis=1)
    cdf /= cdf[:, -1:]
    cols = (cdf > u[:, None]).argmax(axis=1)
    x1 = x1s[cols]
    return CoupledBatch(x0s, x1, "ot_sinkhorn", pair_cost(x0s, x1), plan=plan)


def couple(kind: str, x0s, x1s, seed=0, epsilon: float = 0.05, iters: int = 200) -> CoupledBatch:
    """Dispatch on the config string ``independent`` | ``ot`` | ``sinkhorn``."""
    if kind == "independent":
        return independent_coupling(x0s, x1s, seed)
    if kind == "ot":
        return ot_coupling_exact(x0s, x1s)
    if kind == "sinkhorn":
        return ot_coupling_sinkhorn(x0s, x1s, epsilon, iters, seed)
    raise ValueError(f"unknown coupling kind {kind!r}")

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradflow.metrics import (
    FisherMatrix,
    MetricsSeries,
    convergence_rate,
    fisher_kl_quadratic,
    fisher_matrix,
    frechet_from_moments,
    frechet_gaussian_distance,
    girsanov_kl_mc,
    girsanov_kl_per_path,
    instantaneous_variance,
    spearman_rho,
)
from gradflow.model import ConstantField, as_field, mlp_init
from gradflow.rng import make_rng
from gradflow.samplers import sde_euler_maruyama


def const(c):
    c = np.asarray(c, dtype=float)
    return lambda x, t: np.broadcast_to(c, np.shape(x)).copy()


# -- Frechet --

def test_frechet_identical_sets_zero():
    x = make_rng(0).standard_normal((200, 3))
    assert frechet_gaussian_distance(x, x) == pytest.approx(0.0, abs=1e-8)


def test_frechet_closed_forms():
    assert frechet_from_moments([0.0], [[1.0]], [1.0], [[1.0]]).value == pytest.approx(1.0, abs=1e-12)
    assert frechet_from_moments([0.0], [[1.0]], [0.0], [[4.0]]).value == pytest.approx(1.0, abs=1e-12)


def test_frechet_matches_diagonal_closed_form():
    # commuting covariances: W2^2 = |dmu|^2 + sum (sqrt(a) - sqrt(b))^2
    r = frechet_from_moments([1.0, 2.0], np.diag([4.0, 1.0]), [0.0, 0.0], np.diag([1.0, 9.0])).value
    assert r == pytest.approx(5.0 + 1.0 + 4.0, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_frechet_symmetric(seed):
    rng = make_rng(seed)
    a = rng.standard_normal((50, 2)) @ rng.standard_normal((2, 2))
    b = rng.standard_normal((60, 2)) + 1
    assert frechet_gaussian_distance(a, b) == pytest.approx(frechet_gaussian_distance(b, a), rel=1e-9, abs=1e-12)


def test_frechet_degenerate_is_flagged():
    a = np.column_stack([np.arange(10.0), np.zeros(10)])
    res = frechet_gaussian_distance(a, a, full=True)
    assert res.regularized and res.value == pytest.approx(0.0, abs=1e-8)
    with pytest.raises(ValueError):
        frechet_gaussian_distance(np.zeros((2, 2)), np.zeros((5, 2)))


# -- Girsanov --

def test_girsanov_zero_for_identical_drifts():
    f = const([1.0, 0.0])
    tr = sde_euler_maruyama(f, 1.0, np.zeros((10, 2)), 20, seed=0)
    assert girsanov_kl_mc(f, f, 1.0, tr) == 0.0


def test_girsanov_constant_drift_closed_form():
    f, g = const([1.0, 0.0]), const([0.0, 0.0])
    tr = sde_euler_maruyama(f, 1.0, np.zeros((1000, 2)), 100, seed=1)
    assert girsanov_kl_mc(f, g, 1.0, tr) == pytest.approx(0.5, rel=0.02)


def test_girsanov_sigma_scaling_exact():
    f, g = lambda x, t: -x, const([0.5])
    tr = sde_euler_maruyama(f, 1.0, np.ones((50, 1)), 30, seed=2)
    assert girsanov_kl_mc(f, g, 2.0, tr) == pytest.approx(girsanov_kl_mc(f, g, 1.0, tr) / 4, rel=1e-14)


def test_girsanov_rejects_zero_sigma():
    tr = sde_euler_maruyama(const([0.0]), 0.0, np.zeros((2, 1)), 5)
    with pytest.raises(ValueError):
        girsanov_kl_mc(const([0.0]), const([1.0]), 0.0, tr)


def test_girsanov_list_and_batched_agree():
    f, g = lambda x, t: np.sin(x), lambda x, t: np.cos(x)
    x0 = make_rng(3).standard_normal((6, 2))
    batched = sde_euler_maruyama(f, 1.0, x0, 25, seed=4)
    rows = [sde_euler_maruyama(f, 1.0, x0[j], 25, seed=4) for j in range(6)]
    # row j of the batch uses stream (seed, j); single paths use (seed, 0)
    assert np.allclose(girsanov_kl_per_path(f, g, 1.0, batched)[:1], girsanov_kl_per_path(f, g, 1.0, rows[:1]))
    assert np.isclose(girsanov_kl_mc(f, g, 1.0, batched), np.mean(girsanov_kl_per_path(f, g, 1.0, batched)))


def test_total_kl_equals_average_of_source_conditional_groups():
    # drifts differing by a state-dependent amount; group paths by X0
    f = lambda x, t: -x + 1.0  # noqa: E731
    g = lambda x, t: -0.5 * x  # noqa: E731
    starts = make_rng(5).standard_normal((4, 1))
    per_group = 500
    x0 = np.repeat(starts, per_group, axis=0)
    tr = sde_euler_maruyama(f, 1.0, x0, 50, seed=6)
    vals = girsanov_kl_per_path(f, g, 1.0, tr)
    total, = [np.mean(vals)]
    groups = [np.mean(vals[k * per_group:(k + 1) * per_group]) for k in range(4)]
    se = np.std(vals, ddof=1) / math.sqrt(vals.size)
    assert abs(total - np.mean(groups)) < 3 * se + 1e-15
    # an independent re-simulation agrees within MC error too
    tr2 = sde_euler_maruyama(f, 1.0, x0, 50, seed=7)
    mean2, se2 = girsanov_kl_mc(f, g, 1.0, tr2, return_stderr=True)
    assert abs(total - mean2) < 3 * math.hypot(se, se2)


# -- Fisher --

def test_fisher_identity_for_constant_field():
    model = ConstantField(np.array([0.2, -0.1, 0.4]))
    tr = sde_euler_maruyama(model, 1.0, np.zeros((5, 3)), 10, seed=0)
    fm = fisher_matrix(model, tr, 100, seed=1)
    assert np.allclose(fm.matrix, np.eye(3))
    assert fisher_kl_quadratic(fm, np.zeros(3)) == 0.0


def test_fisher_quadratic_examples():
    fm = FisherMatrix(np.eye(2), 1)
    assert fisher_kl_quadratic(fm, [3.0, 4.0]) == pytest.approx(12.5)
    with pytest.raises(ValueError):
        fisher_kl_quadratic(fm, [1.0])


def test_fisher_symmetric_psd_on_mlp():
    m = mlp_init((3, 6, 2), seed=2)
    tr = sde_euler_maruyama(as_field(m), 1.0, make_rng(3).standard_normal((20, 2)), 20, seed=4)
    f = fisher_matrix(m, tr, 200, seed=5).matrix
    assert np.allclose(f, f.T, atol=1e-10)
    assert np.linalg.eigvalsh(f).min() >= -1e-8


def test_fisher_mc_std_scales_with_sqrt_n():
    m = mlp_init((3, 4, 2), seed=6)
    tr = sde_euler_maruyama(as_field(m), 1.0, make_rng(7).standard_normal((50, 2)), 20, seed=8)
    spread = {}
    for n in (100, 200):
        reps = np.stack([fisher_matrix(m, tr, n, seed=(9, n, r)).matrix for r in range(200)])
        spread[n] = np.median(reps.std(axis=0))
    assert spread[100] / spread[200] == pytest.approx(math.sqrt(2), rel=0.15)


def test_fisher_matches_girsanov_for_constant_field():
    theta0 = np.array([0.3, -0.2])
    dth = np.array([0.05, 0.02])
    base, moved = ConstantField(theta0), ConstantField(theta0 + dth)
    tr_b = sde_euler_maruyama(base, 1.0, np.zeros((200, 2)), 50, seed=0)
    tr_m = sde_euler_maruyama(moved, 1.0, np.zeros((200, 2)), 50, seed=0)
    q = fisher_kl_quadratic(fisher_matrix(base, tr_b, 500, seed=1), dth)
    assert q == pytest.approx(girsanov_kl_mc(moved, base, 1.0, tr_m), rel=0.10)


def test_fisher_parameter_limit():
    m = mlp_init((3, 200, 100, 2))
    tr = sde_euler_maruyama(as_field(m), 1.0, np.zeros((1, 2)), 2, seed=0)
    with pytest.raises(ValueError):
        fisher_matrix(m, tr, 1)


# -- stability --

def series(values, start=0, step=50):
    return MetricsSeries.of([start + step * i for i in range(len(values))], values)


def test_series_validation():
    with pytest.raises(ValueError):
        MetricsSeries.of([0, 0], [1.0, 2.0])
    with pytest.raises(ValueError):
        MetricsSeries.of([0, 1], [1.0, np.nan])
    with pytest.raises(ValueError):
        MetricsSeries.of([0, 1, 2], [1.0, 2.0])


def test_constant_series_zero_variance_and_rate():
    s = series([3.0] * 20)
    assert instantaneous_variance(s) == 0.0
    assert convergence_rate(s) == 0.0


def test_linear_series_wide_bandwidth_is_unweighted_variance():
    s = series(list(range(20)), step=1)
    v = instantaneous_variance(s, window=10, bandwidth=math.inf)
    assert v == pytest.approx(np.var(np.arange(10.0)), rel=1e-12)
    assert instantaneous_variance(s, window=10, bandwidth=1e6) == pytest.approx(v, rel=1e-9)


def test_iid_series_variance_near_one():
    vals = make_rng(0).standard_normal(1000)
    v = instantaneous_variance(series(vals, step=1), window=200, bandwidth=1e4, stride=50)
    assert v == pytest.approx(1.0, rel=0.2)


def test_convergence_rate_examples():
    e = np.arange(20.0)
    assert convergence_rate(MetricsSeries.of(e, -2 * e)) == pytest.approx(2.0)
    vals = np.concatenate([-np.arange(10.0), np.full(10, -9.0)])
    s = MetricsSeries.of(e, vals)
    # direct enumeration of the 11 windows
    ref = np.mean([abs(np.polyfit(e[i:i + 10], vals[i:i + 10], 1)[0]) for i in range(11)])
    assert convergence_rate(s) == pytest.approx(ref, rel=1e-10)
    assert convergence_rate(s) == pytest.approx(0.5, abs=0.05)


def test_window_longer_than_series():
    with pytest.raises(ValueError):
        instantaneous_variance(series([1.0] * 5))
    with pytest.raises(ValueError):
        convergence_rate(series([1.0] * 5))


def test_spearman_examples():
    assert spearman_rho(series([5.0, 4.0, 3.0, 1.0])) == -1.0
    assert spearman_rho(series([1.0, 2.0, 3.0])) == 1.0
    assert spearman_rho(MetricsSeries.of([1, 2, 3], [2.0, 1.0, 3.0])) == pytest.approx(0.5)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        assert spearman_rho(series([2.0] * 5)) == 0.0
        assert any(issubclass(x.category, RuntimeWarning) for x in w)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=12, max_size=30), st.integers(1, 10_000))
def test_stability_metrics_invariant_to_epoch_offset(vals, offset):
    a, b = series(vals), series(vals, start=offset)
    assert instantaneous_variance(a) == pytest.approx(instantaneous_variance(b), rel=1e-9, abs=1e-9)
    assert convergence_rate(a) == pytest.approx(convergence_rate(b), rel=1e-9, abs=1e-9)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert spearman_rho(a) == spearman_rho(b)
        assert -1.0 <= spearman_rho(a) <= 1.0

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clusterre.design import optimal_weight_matrix
from clusterre.fpstats import ClusterExperiment
from clusterre.theory import (
    two_covariate_weight_ratio,
    compare_designs,
    individual_dominance_check,
    leading_variance,
    nu,
    orthogonal_optimal_expansion,
    p_k,
    population_moments,
    tier_expansion,
)

from conftest import make_population


def _random_spd(rng, k):
    a = rng.standard_normal((k, k))
    return a @ a.T + k * np.eye(k)


# --- dimension constant ---------------------------------------------------------------


def test_p_k_closed_forms():
    assert p_k(1) == pytest.approx(math.pi / 6, abs=1e-12)
    assert p_k(2) == pytest.approx(0.5, abs=1e-12)


def test_p_k_decreasing_positive():
    vals = np.array([p_k(k) for k in range(1, 51)])
    assert np.all(vals > 0)
    assert np.all(np.diff(vals) < 0)


@pytest.mark.parametrize("k", [0, -1, 1.5])
def test_p_k_domain(k):
    with pytest.raises(ValueError):
        p_k(k)


# --- efficiency factor ----------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.floats(0.01, 100))
def test_nu_mahalanobis_one_and_scale_invariant(seed, k, scale):
    rng = np.random.default_rng(seed)
    v_ss = _random_spd(rng, k)
    v_ts = rng.standard_normal(k)
    assert nu(v_ts, v_ss, np.linalg.inv(v_ss)) == pytest.approx(1.0, rel=1e-10)
    a = _random_spd(rng, k)
    assert nu(v_ts, v_ss, scale * a) == pytest.approx(nu(v_ts, v_ss, a), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_optimal_weights_at_most_one_for_diagonal(seed, k):
    rng = np.random.default_rng(seed)
    v_ss = np.diag(rng.uniform(0.2, 5, k))
    v_ts = rng.standard_normal(k)
    assert nu(v_ts, v_ss, optimal_weight_matrix(v_ts, v_ss)) <= 1 + 1e-12


def test_nu_zero_direction():
    with pytest.raises(ValueError):
        nu([0.0, 0.0], np.eye(2), np.eye(2))


@pytest.mark.parametrize("delta", [-1.0, 0.0, 1.0, 2.5, -3.0])
def test_two_covariate_weight_ratio(delta):
    assert two_covariate_weight_ratio(delta) == pytest.approx(math.sqrt((4 - delta) / (4 + delta)), abs=1e-10)


def test_weight_ratio_ordering():
    assert two_covariate_weight_ratio(-1.0) > 1
    assert two_covariate_weight_ratio(0.0) == pytest.approx(1.0, abs=1e-12)
    assert two_covariate_weight_ratio(1.0) < 1
    assert two_covariate_weight_ratio(1.0) == pytest.approx(0.7745966692414834, abs=1e-12)


# --- expansions ------------------------------------------------------------------------


def test_orthogonal_example():
    alpha = 0.001
    assert orthogonal_optimal_expansion([0.1, 0.4], alpha) == pytest.approx(2e-4, rel=1e-12)
    # Mahalanobis: R^2 = 0.5
    assert 0.5 * p_k(2) * alpha == pytest.approx(2.5e-4, rel=1e-12)


def test_orthogonal_equal_and_k1_match_mahalanobis():
    alpha = 0.01
    assert orthogonal_optimal_expansion([0.2] * 3, alpha) == pytest.approx(
        0.6 * p_k(3) * alpha ** (2 / 3), rel=1e-12)
    assert orthogonal_optimal_expansion([0.3], alpha) == pytest.approx(0.3 * p_k(1) * alpha**2)


def test_orthogonal_requires_positive():
    with pytest.raises(ValueError):
        orthogonal_optimal_expansion([0.1, 0.0], 0.01)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-4, 1.0), min_size=1, max_size=10))
def test_am_gm_chain(r2):
    r2 = np.array(r2)
    k = r2.size
    geo = k * math.exp(np.mean(np.log(r2)))
    assert geo <= r2.sum() * (1 + 1e-12)
    if np.allclose(r2, r2[0]):
        assert geo == pytest.approx(r2.sum(), rel=1e-12)


def test_single_tier_is_mahalanobis():
    assert tier_expansion([0.4], [3], [0.001]) == pytest.approx(0.4 * p_k(3) * 0.001 ** (2 / 3))


def test_tier_expansion_shape_mismatch():
    with pytest.raises(ValueError):
        tier_expansion([0.1, 0.2], [1], [0.1, 0.1])


def test_tier_dominance_random_configurations():
    rng = np.random.default_rng(0)
    violations = 0
    for _ in range(2000):
        n_tiers = rng.integers(1, 5)
        k_l = rng.integers(1, 4, n_tiers)
        k = int(k_l.sum())
        r2_k = rng.dirichlet(np.ones(k)) * rng.uniform(0.05, 0.95)
        bounds = np.cumsum(np.r_[0, k_l])
        r2_l = [r2_k[bounds[i]:bounds[i + 1]].sum() for i in range(n_tiers)]
        alpha = 10 ** rng.uniform(-4, -1)
        rates = np.exp(rng.dirichlet(np.ones(n_tiers)) * math.log(alpha))
        lhs = tier_expansion(r2_l, k_l, rates)
        rhs = orthogonal_optimal_expansion(r2_k, alpha)
        violations += lhs < rhs - 1e-12
    assert violations == 0


def test_leading_variance_limits():
    assert leading_variance(2.0, 0.0, 3, 0.001) == pytest.approx(2.0)
    assert leading_variance(2.0, 1.0, 2, 0.001) == pytest.approx(2.0 * 0.5 * 0.001)


# --- population moments ---------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["cluster", "individual"]))
def test_r2_two_routes_agree(seed, level):
    rng = np.random.default_rng(seed)
    exp = make_population(rng, m=int(rng.integers(20, 60)), k=int(rng.integers(1, 4)))
    mom = population_moments(exp, level, exp.M // 3)
    assert mom.r2 == pytest.approx(mom.r2_regression(), abs=1e-8)
    assert 0 <= mom.r2 <= 1 + 1e-12


def test_moments_need_potential_outcomes():
    exp = ClusterExperiment(cluster=np.arange(4), c=np.ones((4, 1)), y_obs=np.zeros(4))
    with pytest.raises(ValueError):
        population_moments(exp, "cluster", 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_individual_dominance_holds(seed):
    rng = np.random.default_rng(seed)
    exp = make_population(rng, m=int(rng.integers(15, 60)), k=int(rng.integers(1, 4)),
                          lo=1, hi=int(rng.integers(2, 12)))
    left, right, holds = individual_dominance_check(exp, int(rng.integers(3, exp.M - 3)))
    assert holds, (left, right)


def test_compare_designs_uncorrelated_all_equal():
    rng = np.random.default_rng(1)
    m = 50
    c = rng.standard_normal((m, 2))
    c = c - c.mean(axis=0)
    # outcomes orthogonal to the covariates: project them out
    y = rng.standard_normal(m)
    d = np.column_stack([np.ones(m), c])
    y = y - d @ np.linalg.lstsq(d, y, rcond=None)[0]
    exp = ClusterExperiment(cluster=np.arange(m), c=c, y_pot=np.column_stack([y, 2 * y]))
    rows = compare_designs(exp, [{"name": "MC", "kind": "mahalanobis"},
                                 {"name": "WC", "kind": "weighted_euclidean", "weights": [1.0, 3.0]}],
                           0.001)
    for r in rows:
        assert r.r2 == pytest.approx(0.0, abs=1e-12)
    assert rows[0].leading_variance == pytest.approx(rows[1].leading_variance, rel=1e-10)


def test_compare_designs_tiers_and_orthogonalized(population):
    rows = compare_designs(population, [
        {"name": "MC", "kind": "mahalanobis"},
        {"name": "tiers1", "tiers": [[0, 1, 2, 3]]},
        {"name": "tiers2", "tiers": [[0], [1, 2, 3]]},
        {"name": "WCo", "kind": "optimal_weighted", "orthogonalize": True},
    ], 0.001, m1=20)
    by = {r.name: r for r in rows}
    assert by["tiers1"].leading_variance == pytest.approx(by["MC"].leading_variance, rel=1e-9)
    assert by["tiers2"].tier_rates is not None
    assert np.prod(by["tiers2"].tier_rates) == pytest.approx(0.001)
    # optimal tiers never beat optimal weights on the same orthogonalized covariates
    assert by["tiers2"].leading_variance >= by["WCo"].leading_variance * (1 - 1e-12)


def test_mahalanobis_beats_unorthogonalized_weights_under_negative_correlation():
    rng = np.random.default_rng(2)
    m, k, rho = 400, 4, -0.3
    cov = (1 - rho) * np.eye(k) + rho
    c = rng.multivariate_normal(np.zeros(k), cov, size=m)
    beta = np.array([1.0, 1.0, 1.0, 1.0])
    y0 = c @ beta + rng.standard_normal(m)
    exp = ClusterExperiment(cluster=np.arange(m), c=c, y_pot=np.column_stack([y0, y0 + 1]))
    rows = compare_designs(exp, [{"name": "MC", "kind": "mahalanobis"},
                                 {"name": "WC", "kind": "optimal_weighted"}], 0.001)
    assert rows[0].leading_variance < rows[1].leading_variance

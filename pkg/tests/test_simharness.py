import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clusterre.fpstats import ClusterExperiment, finite_pop_var
from clusterre.simharness import (
    FactorialConfig,
    MetricsRow,
    ScenarioConfig,
    _factorial_cell,
    exchangeable_cov,
    generate_factorial_population,
    generate_population,
    impute_potential_outcomes,
    run_scenario,
    run_study,
    scenario,
    summarize,
    write_rows_csv,
)


def _small(**kw):
    base = dict(M=30, M1=15, K=3, rho=0.3, replications=6, alpha=0.05, mc_size=10_000, seed=3)
    base.update(kw)
    return ScenarioConfig(**base)


# --- populations ---------------------------------------------------------------------


def test_scenario_table():
    cfg = scenario(4)
    assert (cfg.K, cfg.rho, cfg.g) == (12, -0.09, "constant")
    assert scenario(1).gamma == 1.0


def test_sizes_uniform_range():
    exp = generate_population(scenario(1), np.random.default_rng(0))
    assert exp.sizes.min() >= 4 and exp.sizes.max() <= 10
    assert set(np.unique(exp.sizes)) == set(range(4, 11))


@pytest.mark.parametrize("number", [1, 2, 3, 4])
def test_gamma_calibration_share(number):
    exp = generate_population(scenario(number), np.random.default_rng(number))
    assert 0.45 <= exp.meta["share"] <= 0.55


def test_fixed_gamma_kept():
    exp = generate_population(scenario(2, gamma_mode="fixed"), np.random.default_rng(0))
    assert exp.meta["gamma"] == 5.0


def test_rho_zero_correlations_small():
    exp = generate_population(_small(M=100, K=4, rho=0.0), np.random.default_rng(1))
    r = np.corrcoef(exp.x, rowvar=False)
    assert exp.N > 500
    assert np.abs(r - np.eye(4)).max() < 0.1


def test_exchangeable_cov_rejects_infeasible():
    with pytest.raises(ValueError):
        exchangeable_cov(12, -0.1)
    assert np.linalg.eigvalsh(exchangeable_cov(12, -0.09)).min() > 0


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        ScenarioConfig(M=10, M1=10)
    with pytest.raises(ValueError):
        ScenarioConfig(methods=("ReMI",))
    with pytest.raises(ValueError):
        ScenarioConfig.from_dict({"M": 20, "bogus": 1})
    cfg = _small()
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg


def test_population_fixed_by_seed():
    a = generate_population(_small(), np.random.default_rng(5))
    b = generate_population(_small(), np.random.default_rng(5))
    assert np.array_equal(a.y_pot, b.y_pot) and np.array_equal(a.c, b.c)


# --- metrics ------------------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=40), st.floats(-5, 5))
def test_rmse_identity(vals, tau):
    vals = np.array(vals)
    iv = np.column_stack([vals - 1, vals + 1])
    row = summarize("m", tau, vals, iv)
    assert row.rmse**2 == pytest.approx(row.bias**2 + row.sd**2, rel=1e-10, abs=1e-10)
    assert row.rmse == pytest.approx(math.sqrt(np.mean((vals - tau) ** 2)), rel=1e-9, abs=1e-9)
    assert 0 <= row.cp_normal <= 1


def test_summarize_coverage_hand():
    row = summarize("m", 0.0, [0.0, 2.0], np.array([[-1, 1], [1, 3]]), np.array([[-1, 1], [-1, 3]]))
    assert row.cp_normal == 0.5 and row.cp_improved == 1.0
    assert row.len_normal == 2.0 and row.len_improved == 3.0


# --- studies ------------------------------------------------------------------------------


def test_run_scenario_deterministic_and_thread_independent():
    cfg = _small()
    _, rows1 = run_scenario(cfg, threads=1)
    _, rows2 = run_scenario(cfg, threads=1)
    _, rows3 = run_scenario(cfg, threads=2)
    assert [r.to_dict() for r in rows1] == [r.to_dict() for r in rows2]
    for a, b in zip(rows1, rows3):
        for k, v in a.to_dict().items():
            w = b.to_dict()[k]
            assert (v == w) or (isinstance(v, float) and math.isnan(v) and math.isnan(w))


def test_run_scenario_rows_complete():
    _, rows = run_scenario(_small())
    names = [r.method for r in rows]
    assert names == list(ScenarioConfig().methods)
    for r in rows:
        assert r.failures == 0 and r.replications == 6
        has_imp = r.method in ("ReMC", "ReWC", "ReMX", "ReWX", "ReMX.adj", "ReWX.adj")
        assert (r.cp_improved is not None) == has_imp
        if r.method not in ("Haj", "HT"):
            assert 0 < r.acceptance_rate <= 1


def test_shared_assignment_between_plain_and_adjusted():
    exp = generate_population(_small(), np.random.default_rng(0))
    _, raw = run_study(exp, ("ReMC", "ReMC.adj", "HT", "Haj"), replications=5, alpha=0.1,
                       mc_size=10_000, seed=1, return_raw=True)
    # adjusted and plain estimators differ, but both came from draws with the same count
    assert raw["ReMC"].shape == raw["ReMC.adj"].shape == (5, 5)
    assert not np.allclose(raw["ReMC"][:, 0], raw["ReMC.adj"][:, 0])


def test_outcome_shift_equivariance():
    # Hajek estimators and HT adjusted on n are shift equivariant; plain HT is not
    exp = generate_population(_small(), np.random.default_rng(2))
    shifted = ClusterExperiment(cluster=exp.cluster, x=exp.x, c=exp.c, y_pot=exp.y_pot + 3.0)
    kw = dict(methods=("Haj", "ReMX", "ReMC.adj", "ReMX.adj"), replications=5, alpha=0.1,
              mc_size=10_000, seed=4)
    a = run_study(exp, **kw)
    b = run_study(shifted, **kw)
    for ra, rb in zip(a, b):
        assert rb.bias == pytest.approx(ra.bias, abs=1e-8)
        assert rb.sd == pytest.approx(ra.sd, rel=1e-8, abs=1e-10)
    ht = [run_study(e, **dict(kw, methods=("HT",)))[0] for e in (exp, shifted)]
    assert abs(ht[0].bias - ht[1].bias) > 1e-6


def test_write_rows_csv_byte_identical(tmp_path):
    rows = [MetricsRow("a", 0.1, 0.2, math.sqrt(0.05), 0.9, 1.0, None, None, 10, 0, 0.01)]
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_rows_csv(rows, p1)
    write_rows_csv(rows, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_text().splitlines()[0].startswith("method,bias")


# --- factorial ------------------------------------------------------------------------


def test_factorial_population_shape():
    exp = generate_factorial_population(24, "H", "cubic", 5, np.random.default_rng(0), 20_000)
    assert exp.M == 24 and exp.c.shape == (24, 6)
    assert exp.sizes.min() >= 2 and exp.sizes.max() <= 16
    assert np.array_equal(exp.c[:, -1], exp.sizes)


def test_factorial_cell_small():
    cfg = FactorialConfig(Ms=(24,), vns=("L",), fns=("linear",), Ks=(1,), alphas=(0.1,),
                          seeds=(0,), replications=20, probe_draws=10_000)
    row = _factorial_cell(cfg, 24, "L", "linear", 1, 0.1, 0, 1, None)
    assert row["replications"] + row["failures"] == 20
    assert 0 <= row["cp"] <= 1
    assert row["reduction_vs_ht"] == pytest.approx(100 * (1 - row["rmse_adj"] / row["rmse_ht"]))


def test_factorial_config_from_dict():
    cfg = FactorialConfig.from_dict({"Ms": [20, 24], "seeds": [1]})
    assert cfg.Ms == (20, 24) and cfg.seeds == (1,)
    with pytest.raises(ValueError):
        FactorialConfig.from_dict({"bogus": 1})


# --- imputation -------------------------------------------------------------------------


def test_imputation_keeps_observed_and_fits_linear_truth():
    rng = np.random.default_rng(6)
    m = 40
    sizes = rng.integers(2, 6, m)
    cluster = np.repeat(np.arange(m), sizes)
    x = rng.standard_normal((cluster.size, 2))
    z = np.zeros(m, dtype=np.int8)
    z[rng.permutation(m)[:20]] = 1
    y0 = 1 + x @ [1.0, -2.0]
    y1 = 3 + x @ [0.5, 1.0]
    zu = z[cluster]
    exp = ClusterExperiment(cluster=cluster, x=x, y_obs=np.where(zu == 1, y1, y0), z=z)
    imp = impute_potential_outcomes(exp)
    assert np.allclose(imp.y_pot[:, 0], y0) and np.allclose(imp.y_pot[:, 1], y1)
    assert finite_pop_var(imp.y_pot[:, 1] - imp.y_pot[:, 0]) > 0


def test_imputation_needs_assignment():
    with pytest.raises(ValueError):
        impute_potential_outcomes(ClusterExperiment(cluster=np.arange(4), y_obs=np.zeros(4)))

import csv
import json

import numpy as np
import pytest

from clusterre.cli import main
from clusterre.design import draw_complete

from conftest import make_population


def _write_units(path, exp, z=None, with_y=True):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["cluster_id", "size"] + [f"x{k + 1}" for k in range(exp.x.shape[1])]
        if with_y:
            head += ["y", "z"]
        w.writerow(head)
        y = exp.with_assignment(z).y_obs if with_y else None
        for i in range(exp.N):
            cid = exp.cluster[i]
            row = [f"c{cid:03d}", int(exp.sizes[cid])] + list(exp.x[i])
            if with_y:
                row += [y[i], int(z[cid])]
            w.writerow(row)


@pytest.fixture
def units(tmp_path):
    exp = make_population(np.random.default_rng(42), m=30, k=2)
    z = draw_complete(exp.M, 15, np.random.default_rng(1)).z
    path = tmp_path / "units.csv"
    _write_units(path, exp, z)
    return exp, z, path


def _config(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


# --- design ------------------------------------------------------------------------------


def test_design_infinite_threshold(tmp_path, units):
    _, _, data = units
    cfg = _config(tmp_path, {"x_columns": ["x1", "x2"], "c_columns": ["n", "total:x1", "total:x2"],
                             "m1": 15, "criterion": {"threshold": "inf"}})
    out = tmp_path / "z.csv"
    assert main(["design", "--config", cfg, "--data", str(data), "--out", str(out), "--seed", "3"]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 30 and sum(int(r["z"]) for r in rows) == 15
    man = json.loads((tmp_path / "z.csv.manifest.json").read_text())
    assert man["draws_used"] == 1 and man["schema_version"] == 1


def test_design_target_rate_and_reproducible(tmp_path, units):
    _, _, data = units
    cfg = _config(tmp_path, {"x_columns": ["x1", "x2"], "c_columns": ["n", "total:x1"],
                             "m1": 15, "criterion": {"target_rate": 0.5}})
    outs = []
    for k in range(2):
        out = tmp_path / f"z{k}.csv"
        assert main(["design", "--config", cfg, "--data", str(data), "--out", str(out),
                     "--seed", "11"]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    man = json.loads((tmp_path / "z0.csv.manifest.json").read_text())
    assert man["statistic"] <= man["threshold"]


def test_design_individual_level(tmp_path, units):
    _, _, data = units
    cfg = _config(tmp_path, {"x_columns": ["x1", "x2"], "m1": 12,
                             "criterion": {"level": "individual", "target_rate": 0.2}})
    assert main(["design", "--config", cfg, "--data", str(data), "--out", str(tmp_path / "z.csv")]) == 0


def test_design_missing_column_exit_1(tmp_path, units, capsys):
    _, _, data = units
    cfg = _config(tmp_path, {"x_columns": ["x9"], "criterion": {"threshold": "inf"}})
    assert main(["design", "--config", cfg, "--data", str(data), "--out", str(tmp_path / "z.csv")]) == 1
    assert "x9" in capsys.readouterr().err


def test_design_unreachable_threshold_exit_2(tmp_path, units):
    _, _, data = units
    cfg = _config(tmp_path, {"x_columns": ["x1"], "c_columns": ["total:x1"], "max_draws": 50,
                             "criterion": {"threshold": 1e-14}})
    assert main(["design", "--config", cfg, "--data", str(data), "--out", str(tmp_path / "z.csv")]) == 2


def test_malformed_json_reports_position(tmp_path, units, capsys):
    _, _, data = units
    p = tmp_path / "bad.json"
    p.write_text('{\n  "m1": 3,\n  "criterion": {oops}\n}')
    assert main(["design", "--config", str(p), "--data", str(data), "--out", str(tmp_path / "z")]) == 1
    assert "bad.json:3:" in capsys.readouterr().err


def test_bad_flags(tmp_path):
    assert main(["design", "--mc-size", "5"]) == 1
    assert main(["bogus"]) == 1
    assert main(["design", "--seed", "-1"]) == 1


# --- analyze -----------------------------------------------------------------------------


def test_analyze_haj_without_criterion(tmp_path, units, caplog):
    exp, z, data = units
    cfg = _config(tmp_path, {"x_columns": ["x1", "x2"], "method": "haj"})
    out = tmp_path / "a.json"
    assert main(["analyze", "--config", cfg, "--data", str(data), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    from clusterre.estimate import tau_haj

    assert rep["tau_hat"] == pytest.approx(tau_haj(exp, z), rel=1e-10)
    assert "improved_ci" not in rep and rep["warnings"]
    lo, hi = rep["normal_ci"]
    assert lo < rep["tau_hat"] < hi


def test_analyze_with_criterion_and_impute(tmp_path, units):
    _, _, data = units
    cfg = _config(tmp_path, {"x_columns": ["x1", "x2"], "c_columns": ["n", "total:x1", "total:x2"],
                             "method": "ht_adj", "criterion": {"target_rate": 0.01}})
    out = tmp_path / "a.json"
    assert main(["analyze", "--config", cfg, "--data", str(data), "--out", str(out),
                 "--mc-size", "10000", "--impute"]) == 0
    rep = json.loads(out.read_text())
    lo, hi = rep["improved_ci"]
    assert lo < rep["tau_hat"] < hi
    assert 0 <= rep["improved"]["r2_hat"] <= 1
    assert "tau" in rep["imputed_population"]
    man = json.loads((tmp_path / "a.json.manifest.json").read_text())
    assert set(man["clipping"]) == {"v_clipped", "r2_clipped"}


def test_analyze_mismatched_level(tmp_path, units):
    _, _, data = units
    cfg = _config(tmp_path, {"x_columns": ["x1", "x2"], "c_columns": ["n"], "method": "haj",
                             "criterion": {"level": "cluster", "target_rate": 0.1}})
    assert main(["analyze", "--config", cfg, "--data", str(data), "--out", str(tmp_path / "a.json")]) == 1


def test_analyze_rank_deficient_exit_2(tmp_path, units):
    _, _, data = units
    cfg = _config(tmp_path, {"x_columns": ["x1", "x1"], "method": "haj_adj"})
    assert main(["analyze", "--config", cfg, "--data", str(data), "--out", str(tmp_path / "a.json")]) == 2


# --- theory ------------------------------------------------------------------------------


def test_theory_weight_ratio_and_dominance(tmp_path):
    cfg = _config(tmp_path, {"weight_ratio": {"delta": [-1, 0, 1]},
                             "scenario": {"M": 40, "M1": 20, "K": 3, "rho": 0.2}, "individual_dominance": True,
                             "criteria": [{"name": "MC", "kind": "mahalanobis"},
                                          {"name": "MX", "level": "individual"}]})
    out = tmp_path / "t.json"
    assert main(["theory", "--config", cfg, "--out", str(out), "--seed", "2"]) == 0
    rep = json.loads(out.read_text())
    ratios = [r["ratio"] for r in rep["weight_ratio"]]
    assert ratios[0] > 1 and ratios[1] == pytest.approx(1.0) and ratios[2] < 1
    assert rep["individual_dominance"]["verdict"] == "holds"
    assert [d["name"] for d in rep["designs"]] == ["MC", "MX"]


def test_theory_needs_content(tmp_path):
    cfg = _config(tmp_path, {})
    assert main(["theory", "--config", cfg, "--out", str(tmp_path / "t.json")]) == 1


# --- simulate ----------------------------------------------------------------------------


def test_simulate_small_rerun_identical(tmp_path):
    cfg = _config(tmp_path, {"scenario": {"M": 24, "M1": 12, "K": 2, "rho": 0.1, "replications": 4,
                                          "alpha": 0.1, "methods": ["ReMC", "Haj", "HT", "ReMX.adj"]}})
    outs = []
    for k in range(2):
        d = tmp_path / f"sim{k}"
        assert main(["simulate", "--config", cfg, "--out", str(d), "--seed", "9",
                     "--mc-size", "10000"]) == 0
        outs.append((d / "metrics.csv").read_bytes())
        assert json.loads((d / "manifest.json").read_text())["failures"] == 0
    assert outs[0] == outs[1]
    rows = list(csv.DictReader(open(tmp_path / "sim0" / "metrics.csv")))
    assert [r["method"] for r in rows] == ["ReMC", "Haj", "HT", "ReMX.adj"]


def test_simulate_data_requires_impute(tmp_path, units):
    _, _, data = units
    cfg = _config(tmp_path, {"data": str(data), "x_columns": ["x1", "x2"]})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "s")]) == 1


def test_simulate_unknown_scenario(tmp_path):
    cfg = _config(tmp_path, {"scenario": 9})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "s")]) == 1

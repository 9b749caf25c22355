import json
import os

import numpy as np
import pytest

from wcrlab.cli import main as cli_main
from wcrlab.errors import ConfigError
from wcrlab.harness import (
    ExperimentConfig,
    check_pair,
    default_bound_pairs,
    run_experiment,
)


def _cfg(**kw):
    return ExperimentConfig.from_dict(kw)


# ---------------------------------------------------------------------------
# configuration validation
# ---------------------------------------------------------------------------

def test_config_requires_seed():
    with pytest.raises(ConfigError):
        _cfg(kind="figure1", family="scale:uniform", n_grid=[10], eps=[1e-4])


def test_config_rejects_unknown_kind():
    with pytest.raises(ConfigError):
        _cfg(kind="mystery", seed=1)


def test_config_rejects_unknown_ids():
    with pytest.raises(ConfigError):
        _cfg(kind="clt", family="nope", seed=1)
    with pytest.raises(ConfigError):
        _cfg(kind="bound", seed=1,
             pairs=[{"family": "gauss2", "estimator": "quux", "theta": [0, 1]}])


def test_config_rejects_empty_grids():
    with pytest.raises(ConfigError):
        _cfg(kind="figure1", family="scale:uniform", n_grid=[], eps=[1e-4], seed=1)
    with pytest.raises(ConfigError):
        _cfg(kind="bound", pairs=[], seed=1)


def test_config_rejects_estimand_dimension_mismatch():
    with pytest.raises(ConfigError):
        _cfg(kind="bound", seed=1,
             pairs=[{"family": "gauss2", "estimator": "sample_max", "theta": [0.0, 1.0]}])


# ---------------------------------------------------------------------------
# experiment content
# ---------------------------------------------------------------------------

def test_figure1_small_run_values():
    cfg = _cfg(kind="figure1", family="scale:uniform", theta=1.0, n_grid=[200],
               reps=500, eps=[1e-4], seed=123)
    table = run_experiment(cfg)
    rows = {(r["estimator"], r["metric"]): float(r["value"]) for r in table.rows}
    n = 200
    assert abs(rows[("sample_max", "eps_sensitivity")] - 1.0) < 0.15
    assert abs(rows[("ble_uniform_scale", "eps_sensitivity")] - 4.0 / n) < 0.15 * 4.0 / n
    assert abs(rows[("wpe_uniform_scale", "eps_sensitivity")] - 3.0 / n) < 0.15 * 3.0 / n
    assert abs(rows[("ble_uniform_scale", "variance")] - 1.0 / (3 * n)) < 0.2 / (3 * n)
    assert abs(rows[("sample_max", "bias")] + 1.0 / (n + 1)) < 3e-3


def test_figure1_csv_is_deterministic():
    cfg = _cfg(kind="figure1", family="scale:uniform", theta=1.0, n_grid=[50, 100],
               reps=200, eps=[1e-3, 1e-4], seed=7)
    a = run_experiment(cfg).to_csv()
    b = run_experiment(cfg).to_csv()
    assert a == b
    assert a.startswith("# schema=1\nfamily,estimator,theta,n,reps,eps,metric,value,stderr,seed\n")


def test_bound_suite_satisfies_wcr_inequality():
    cfg = _cfg(kind="bound", pairs=default_bound_pairs(), n=32, reps=800, seed=42)
    table = run_experiment(cfg)
    for rep in table.artifacts["_reports_objects"]:
        slack = 3.0 * rep.gap_min_eig_stderr + 1e-10
        assert rep.gap_min_eig >= -slack, (rep.family_id, rep.estimator_id)


def test_exact_pairs_have_zero_gap():
    rep = check_pair({"family": "location:gaussian", "estimator": "sample_mean", "theta": 0.0},
                     n=64, reps=2, seed=3)
    assert abs(rep.gap_min_eig) < 1e-12
    assert rep.efficiency_ratio == pytest.approx(1.0, abs=1e-12)
    rep = check_pair({"family": "regression", "estimator": "ols",
                      "theta": [1.0, 2.0, -0.5]}, n=50, reps=2, seed=4)
    assert abs(rep.gap_min_eig) < 1e-12


def test_gauss2_variance_gap_shrinks_with_n():
    theta = [0.2, 1.5]
    gaps = {}
    for n in (16, 64):
        rep = check_pair({"family": "gauss2", "estimator": "sample_variance", "theta": theta},
                         n=n, reps=2500, seed=11)
        assert rep.gap_min_eig - 3.0 * rep.gap_min_eig_stderr > 0.0  # strictly positive
        gaps[n] = rep.gap_min_eig * n
    assert gaps[64] < gaps[16]


def test_laplace_discrepancy_rows_present():
    cfg = _cfg(kind="bound", seed=5, n=20, reps=10,
               pairs=[{"family": "location:laplace", "estimator": "sample_mean", "theta": 0.0}])
    table = run_experiment(cfg)
    metrics = {r["metric"]: float(r["value"]) for r in table.rows}
    assert metrics["sensitivity_paper_table"] == pytest.approx(2.0 / 20)
    assert metrics["sensitivity_computed"] == pytest.approx(1.0 / 20)
    assert metrics["sensitivity_discrepancy"] == 1.0


def test_clt_run_fields():
    cfg = _cfg(kind="clt", family="scale:uniform", theta=1.0, n=500, reps=400, seed=21)
    table = run_experiment(cfg)
    vals = {r["metric"]: float(r["value"]) for r in table.rows}
    assert vals["clt_predicted_variance"] == pytest.approx(0.2, abs=1e-9)
    assert abs(vals["clt_empirical_variance"] - 0.2) < 0.05
    assert abs(vals["clt_skewness"]) < 0.5


def test_wpe_sweep_run():
    cfg = _cfg(kind="wpe-sweep", family="scale:uniform", theta=1.0, n_grid=[100],
               reps=50, seed=31)
    table = run_experiment(cfg)
    vals = {r["metric"]: float(r["value"]) for r in table.rows}
    assert abs(vals["n_sensitivity"] - 3.0) < 0.01


def test_sdot_demo_artifacts(unit_square):
    cfg = _cfg(kind="sdot-demo", family="unif2d", theta=0.0, seed=41,
               sites=[[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])
    table = run_experiment(cfg)
    art = table.artifacts["sdot"]
    assert art["w2sq"] == pytest.approx(1.0 / 24.0, abs=1e-8)
    assert np.max(np.abs(art["weights"])) < 1e-10
    np.testing.assert_allclose(art["masses"], 0.25, atol=1e-10)


# ---------------------------------------------------------------------------
# command line interface
# ---------------------------------------------------------------------------

def _write_cfg(tmp_path, name, payload):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def test_cli_roundtrip_and_determinism(tmp_path):
    cfg = _write_cfg(tmp_path, "fig.json", {
        "kind": "figure1", "family": "scale:uniform", "theta": 1.0,
        "n_grid": [50], "reps": 100, "eps": [1e-4], "seed": 99,
    })
    assert cli_main(["figure1", "--config", cfg, "--out", str(tmp_path / "o1")]) == 0
    assert cli_main(["figure1", "--config", cfg, "--out", str(tmp_path / "o2")]) == 0
    a = (tmp_path / "o1" / "results.csv").read_bytes()
    b = (tmp_path / "o2" / "results.csv").read_bytes()
    assert a == b
    manifest = json.loads((tmp_path / "o1" / "manifest.json").read_text())
    assert manifest["schema"] == 1 and manifest["seed"] == 99
    assert "results.csv" in manifest["outputs"]


def test_cli_config_error_exit_code(tmp_path):
    cfg = _write_cfg(tmp_path, "bad.json", {"kind": "figure1"})
    assert cli_main(["figure1", "--config", cfg, "--out", str(tmp_path / "ob")]) == 2
    missing = str(tmp_path / "missing.json")
    assert cli_main(["figure1", "--config", missing, "--out", str(tmp_path / "oc")]) == 2
    # kind mismatch between subcommand and config
    figcfg = _write_cfg(tmp_path, "fig2.json", {
        "kind": "figure1", "family": "scale:uniform", "theta": 1.0,
        "n_grid": [10], "reps": 10, "eps": [1e-4], "seed": 1,
    })
    assert cli_main(["clt", "--config", figcfg, "--out", str(tmp_path / "od")]) == 2


def test_cli_numeric_failure_exit_code(tmp_path):
    # duplicate sites make the dual solve degenerate
    cfg = _write_cfg(tmp_path, "sdot.json", {
        "kind": "sdot-demo", "family": "unif2d", "theta": 0.0, "seed": 2,
        "sites": [[0.5, 0.5], [0.5, 0.5]],
    })
    assert cli_main(["sdot", "--config", cfg, "--out", str(tmp_path / "oe")]) == 3


def test_cli_wpe_fit(tmp_path):
    rng = np.random.default_rng(0)
    samples = rng.random(200)
    path = tmp_path / "samples.csv"
    np.savetxt(path, samples, delimiter=",")
    cfg = _write_cfg(tmp_path, "wpe.json", {
        "kind": "wpe-fit", "family": "scale:uniform", "samples_csv": str(path),
        "gradients": True, "seed": 3,
    })
    out = tmp_path / "of"
    assert cli_main(["wpe", "--config", cfg, "--out", str(out)]) == 0
    fit = json.loads((out / "fit.json").read_text())
    i = np.arange(1, 201)
    expected = float(1.5 / 200**2 * np.dot(2 * i - 1, np.sort(samples)))
    assert fit["theta_hat"][0] == pytest.approx(expected, abs=1e-8)
    grads = json.loads((out / "gradients.json").read_text())
    assert len(grads) == 200

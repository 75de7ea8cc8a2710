import csv
import io
import json
import logging

import pytest

from fedgp import cli
from fedgp.cgp import params_from_dict
from fedgp.dataio import load_config
from fedgp.problems import make_synthetic
from fedgp.sim import BoundReport
from fedgp.validation import BoundStudy

SMALL = {
    "system": {
        "dim": 20,
        "server": {"F": 3e9, "p": 20.0, "r": 7.5e7, "s": 64, "C": 100.0, "alpha": 2e-28},
        "workers": {"count": 4, "F": 1e9, "s": 16, "p": 1.5, "r": 5e6, "C": 1e8, "alpha": 2e-28},
    },
    "ml": {"L": 1.0, "sigma": 1.0, "G": 1.0, "f_init": 1.0},
    "limits": {"T_max": 1e4, "C_max": 0.5},
    "steps": {"constant": {"gamma": 0.05}},
    "simulation": {"problem": "quadratic", "samples_per_worker": 50},
    "seed": 3,
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    return code, capsys.readouterr().out


def test_optimize_full_beats_constant(capsys):
    code, out = run(capsys, "optimize", "--config", "reference", "--mode", "full")
    assert code == 0
    full = json.loads(out)
    code, out = run(capsys, "optimize", "--config", "reference", "--mode", "constant")
    const = json.loads(out)
    assert full["status"] == "Converged"
    assert full["final"]["energy"] <= const["final"]["energy"] * (1 + 1e-6)
    assert full["rounded"]["energy"] <= const["rounded"]["energy"]
    assert full["kkt_residual"] <= 1e-4
    assert full["energy_trace"][-1] == pytest.approx(full["final"]["energy"], rel=1e-12)


def test_optimize_tiny_time_budget_is_infeasible(capsys, tmp_path):
    out = tmp_path / "r.json"
    code, _ = run(capsys, "optimize", "--config", "reference", "--mode", "constant",
                  "--t-max", "1e-9", "--out", out)
    assert code == 2
    assert json.loads(out.read_text())["status"] == "Infeasible"


def test_optimize_pm_baseline_has_one_local_step(capsys):
    code, out = run(capsys, "optimize", "--config", "reference", "--mode", "constant",
                    "--baseline", "pm")
    assert code == 0
    assert json.loads(out)["rounded"]["K"][1:] == [1] * 10


def read_rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_sweep_drops_duplicates_and_keeps_grid_order(capsys, caplog, small_config):
    with caplog.at_level(logging.WARNING, logger="fedgp"):
        code, out = run(capsys, "sweep", "--config", small_config, "--var", "Cmax",
                        "--grid", "0.6,0.4,0.6,0.5")
    assert code == 0
    assert "duplicate" in caplog.text
    rows = read_rows(out)
    assert [float(r["value"]) for r in rows] == [0.6, 0.4, 0.5]
    assert all(r["status"] == "Converged" for r in rows)


def test_sweep_energy_non_increasing_in_error_limit(capsys):
    code, out = run(capsys, "sweep", "--config", "reference", "--var", "Cmax",
                    "--grid", "0.15,0.2,0.25,0.3,0.4", "--modes", "constant,full")
    assert code == 0
    rows = read_rows(out)
    for mode in ("constant", "full"):
        energies = [float(r["relaxed_energy"]) for r in rows if r["mode"] == mode]
        assert len(energies) == 5
        assert all(b <= a * (1 + 1e-9) for a, b in zip(energies, energies[1:]))


def test_sweep_homogeneous_speeds_cost_least(capsys):
    code, out = run(capsys, "sweep", "--config", "reference", "--var", "Fratio",
                    "--grid", "1,2,5,10", "--modes", "constant,full")
    assert code == 0
    rows = read_rows(out)
    for mode in ("constant", "full"):
        energies = {float(r["value"]): float(r["relaxed_energy"]) for r in rows if r["mode"] == mode}
        assert min(energies, key=energies.get) == 1.0


def test_sweep_keeps_infeasible_rows(capsys, small_config):
    code, out = run(capsys, "sweep", "--config", small_config, "--var", "Tmax", "--grid", "1e-9,1e4")
    assert code == 0
    rows = read_rows(out)
    assert [r["status"] for r in rows] == ["Infeasible", "Converged"]
    assert rows[0]["energy"] == "inf"


def test_sweep_rejects_non_positive_grid(capsys, small_config):
    code, _ = run(capsys, "sweep", "--config", small_config, "--var", "Cmax", "--grid", "0.2,-1")
    assert code == 1


def test_simulate_is_reproducible(capsys, small_config, tmp_path):
    params = tmp_path / "p.json"
    params.write_text(json.dumps({"K": [6, 2, 1, 3, 2], "B": 4, "rule": "constant", "gamma": 0.05}))
    first = run(capsys, "simulate", "--config", small_config, "--params", params, "--trials", 2)
    second = run(capsys, "simulate", "--config", small_config, "--params", params, "--trials", 2)
    assert first[0] == 0 and first == second
    trials = json.loads(first[1])["trials"]
    assert len(trials) == 2 and trials[0]["seed"] != trials[1]["seed"]
    for t in trials:
        assert len(t["losses"]) == 6
        assert all(isinstance(v, float) for v in t["losses"])


def test_simulate_from_optimizer_and_sync_metric(capsys, small_config):
    code, out = run(capsys, "simulate", "--config", small_config, "--params", "from-optimizer",
                    "--record", "sync")
    assert code == 0
    data = json.loads(out)
    assert len(data["trials"][0]["losses"]) == data["params"]["K"][0]
    assert data["trials"][0]["convergence_metric"] > 0


def test_simulate_rejects_fractional_params(capsys, small_config, tmp_path):
    params = tmp_path / "p.json"
    params.write_text(json.dumps({"K": [6.5, 2, 1, 3, 2], "B": 4, "rule": "constant", "gamma": 0.05}))
    code, _ = run(capsys, "simulate", "--config", small_config, "--params", params)
    assert code == 1


def test_estimate_constants_round_trip(capsys, small_config, tmp_path):
    out = tmp_path / "est.json"
    code, _ = run(capsys, "estimate-constants", "--config", small_config, "--budget", 64, "--out", out)
    assert code == 0
    cfg = load_config(out)
    truth = make_synthetic("quadratic", 20, 50, 4, 3).smoothness()
    # the estimate carries a 1.1 safety factor
    assert cfg.ml.L / 1.1 == pytest.approx(truth, rel=0.10)
    code, report = run(capsys, "optimize", "--config", out, "--mode", "constant")
    assert code in (0, 2, 3)
    assert json.loads(report)["mode"] == "constant"


def test_estimate_constants_needs_a_budget(capsys, small_config):
    code, _ = run(capsys, "estimate-constants", "--config", small_config, "--budget", 0)
    assert code == 1


def test_validate_bound_passes_on_quadratic(capsys, small_config):
    code, out = run(capsys, "validate-bound", "--config", small_config, "--instances", 3,
                    "--trials", 5)
    assert code == 0
    data = json.loads(out)
    assert data["passed"] and len(data["instances"]) == 3


def test_validate_bound_failure_exit_code(capsys, small_config, monkeypatch):
    failing = BoundReport(bound=1.0, metrics=[2.0], mean_metric=2.0, std_error=0.0, ratio=2.0,
                          slack=0.0, passed=False, start_losses=[1.0], max_distance=1.0, ml=None)

    def fake_study(problem, count, trials, seed, jobs=1, fallback=None):
        configs = [(params_from_dict({"K": [1, 1, 1, 1, 1], "B": 1, "gamma": 0.1}),
                    cli.load_config(small_config).profile())]
        return BoundStudy(configs, [failing])

    monkeypatch.setattr(cli, "bound_study", fake_study)
    code, out = run(capsys, "validate-bound", "--config", small_config)
    assert code == 4
    assert json.loads(out)["passed"] is False


def test_config_error_names_the_field(capsys, caplog, tmp_path):
    bad = json.loads(json.dumps(SMALL))
    del bad["limits"]["C_max"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    with caplog.at_level(logging.ERROR, logger="fedgp"):
        code, _ = run(capsys, "optimize", "--config", path, "--mode", "constant")
    assert code == 1
    assert "limits.C_max" in caplog.text


def test_missing_config_file(capsys, tmp_path):
    code, _ = run(capsys, "optimize", "--config", tmp_path / "nope.json", "--mode", "constant")
    assert code == 1


def test_missing_step_rule_for_mode(capsys, small_config):
    code, _ = run(capsys, "optimize", "--config", small_config, "--mode", "exponential")
    assert code == 1

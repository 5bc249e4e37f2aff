import json

import numpy as np
import pytest

from qtraj.cli import main
from qtraj.reference import random_valid_family

KS_CONFIG = {"model": {"reference": "keep_switch", "p": 0.3}, "observable": "population:0",
             "experiment": {"initial": "plus"}}
IDENTITY = {"dim": 2, "operators": [[[[1, 0], [0, 0]], [[0, 0], [1, 0]]]]}


def _write(tmp_path, data, name="cfg.json"):
    f = tmp_path / name
    f.write_text(data if isinstance(data, str) else json.dumps(data))
    return str(f)


def _run(tmp_path, *argv, out="out"):
    o = tmp_path / out
    return main([*argv, "--out", str(o)]), o


def test_validate_ok(tmp_path):
    code, out = _run(tmp_path, "validate", _write(tmp_path, KS_CONFIG))
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["passed"] is True


def test_validate_non_stochastic(tmp_path):
    bad = {"dim": 2, "operators": [[[[0.5, 0], [0, 0]], [[0, 0], [1, 0]]]]}
    code, _ = _run(tmp_path, "validate", _write(tmp_path, bad))
    assert code == 1


def test_bad_json_exit_two(tmp_path, capsys):
    code, _ = _run(tmp_path, "check", _write(tmp_path, '{"model": {"dim": 2,,}}'))
    assert code == 2
    err = capsys.readouterr().err
    assert "line 1" in err and "column" in err


def test_missing_file_exit_two(tmp_path):
    code, _ = _run(tmp_path, "check", str(tmp_path / "nope.json"))
    assert code == 2


def test_bad_observable_exit_two(tmp_path):
    code, _ = _run(tmp_path, "simulate", _write(tmp_path, KS_CONFIG), "--observable", "bogus:3")
    assert code == 2


def test_check_identity_exit_three(tmp_path):
    code, out = _run(tmp_path, "check", _write(tmp_path, IDENTITY))
    assert code == 3
    rep = json.loads((out / "report.json").read_text())
    assert rep["pur_holds"] == "no"


def test_clt_refuses_identity(tmp_path):
    code, out = _run(tmp_path, "clt", _write(tmp_path, IDENTITY), "--n", "100", "--replicas", "10")
    assert code == 3
    assert "assumptions" in json.loads((out / "report.json").read_text())


def test_simulate_reproducible(tmp_path):
    cfg = _write(tmp_path, KS_CONFIG)
    c1, o1 = _run(tmp_path, "simulate", cfg, "--n", "200", "--seed", "5", out="a")
    c2, o2 = _run(tmp_path, "simulate", cfg, "--n", "200", "--seed", "5", out="b")
    assert c1 == c2 == 0
    assert (o1 / "trajectory.csv").read_bytes() == (o2 / "trajectory.csv").read_bytes()
    man = json.loads((o1 / "manifest.json").read_text())
    assert man["master_seed"] == 5 and man["exit_code"] == 0
    assert len(man["config_sha256"]) == 64
    assert man["outputs"]["trajectory"] == "trajectory.csv"


def test_simulate_plot(tmp_path):
    code, out = _run(tmp_path, "simulate", _write(tmp_path, KS_CONFIG), "--n", "50", "--plot")
    assert code == 0
    svg = (out / "trajectory.svg").read_text()
    assert svg.startswith("<svg") or svg.startswith("<?xml")
    assert (out / "estimator.svg").exists()


def test_bare_family_file(tmp_path):
    fam = random_valid_family(2, 2, 0)
    code, out = _run(tmp_path, "simulate", _write(tmp_path, fam.to_json()), "--n", "20")
    assert code == 0
    assert len((out / "trajectory.csv").read_text().splitlines()) == 22


def test_poisson_command(tmp_path):
    cfg = _write(tmp_path, {**KS_CONFIG, "experiment": {"initial": "plus", "probes": 20}})
    code, out = _run(tmp_path, "poisson", cfg)
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["gamma_sq"] == pytest.approx(0.21)
    assert rep["gamma_sq_method"] == "atoms_exact"
    assert rep["max_probe_residual"] < 1e-4
    assert len((out / "poisson.csv").read_text().splitlines()) == 21


def test_clt_command(tmp_path):
    code, out = _run(tmp_path, "clt", _write(tmp_path, KS_CONFIG), "--n", "500", "--replicas", "100")
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert 0 <= rep["p_value"] <= 1
    assert rep["gamma_sq"] == pytest.approx(0.21)
    rows = (out / "clt.csv").read_text().splitlines()
    assert rows[0] == "replica,normalized_sum" and len(rows) == 101


def test_clt_constant_observable_is_domain_error(tmp_path):
    code, _ = _run(tmp_path, "clt", _write(tmp_path, KS_CONFIG), "--observable", "constant:1",
                   "--n", "100", "--replicas", "10")
    assert code == 1


def test_fclt_command(tmp_path):
    code, out = _run(tmp_path, "fclt", _write(tmp_path, KS_CONFIG), "--n", "200", "--replicas", "50")
    assert code == 0
    rows = (out / "fclt.csv").read_text().splitlines()
    # upper triangle s <= t of the 5-point grid
    assert rows[0] == "s,t,covariance,target" and len(rows) == 16


def test_lil_command(tmp_path):
    code, out = _run(tmp_path, "lil", _write(tmp_path, KS_CONFIG), "--n", "10000", "--replicas", "3", "--plot")
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert len(rep["plus_max"]) == 3
    assert (out / "lil.csv").exists()


def test_lil_short_path_rejected(tmp_path):
    code, _ = _run(tmp_path, "lil", _write(tmp_path, KS_CONFIG), "--n", "100", "--replicas", "2")
    assert code == 2


def test_mdp_command(tmp_path):
    code, out = _run(tmp_path, "mdp", _write(tmp_path, KS_CONFIG), "--n", "2000", "--replicas", "30")
    assert code == 0
    rows = (out / "mdp.csv").read_text().splitlines()
    assert rows[0] == "z,cumulant,stderr,target,rate_function"


def test_wasserstein_command(tmp_path):
    code, out = _run(tmp_path, "wasserstein", _write(tmp_path, KS_CONFIG), "--n", "15", "--replicas", "2000")
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert 0 < rep["lambda_hat"] < 1
    assert rep["target"] == "exact invariant atoms"
    assert (out / "decay.csv").read_text().startswith("n,W1,stderr")


def test_reference_p_out_of_range(tmp_path):
    cfg = {"model": {"reference": "keep_switch", "p": 0.6}}
    code, _ = _run(tmp_path, "check", _write(tmp_path, cfg))
    assert code == 2


def test_skip_checks(tmp_path):
    # past the checker, the identity still has no unique invariant mean
    cfg = {"model": IDENTITY, "observable": "population:0", "experiment": {"initial": "basis:0"}}
    code, _ = _run(tmp_path, "clt", _write(tmp_path, cfg), "--skip-checks", "--n", "50", "--replicas", "10")
    assert code == 1


def test_threads_do_not_change_results(tmp_path):
    cfg = _write(tmp_path, KS_CONFIG)
    _, a = _run(tmp_path, "clt", cfg, "--n", "300", "--replicas", "40", "--threads", "1", out="a")
    _, b = _run(tmp_path, "clt", cfg, "--n", "300", "--replicas", "40", "--threads", "4", out="b")
    assert (a / "clt.csv").read_bytes() == (b / "clt.csv").read_bytes()
    ra = json.loads((a / "report.json").read_text())
    rb = json.loads((b / "report.json").read_text())
    assert np.isclose(ra["p_value"], rb["p_value"], rtol=0, atol=0)

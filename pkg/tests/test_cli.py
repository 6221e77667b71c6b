import json

import numpy as np
import pytest

from critblowup import cli


def run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    code = cli.main([*argv, "--out", str(out)])
    return code, out


def test_constants_n5_ball(tmp_path, capsys):
    code, out = run(tmp_path, "constants")
    assert code == cli.EXIT_OK
    data = json.loads((out / "constants.json").read_text())
    assert data["b"] == pytest.approx(2 / (3 * 15**0.75), rel=1e-10)
    assert data["H_qq"] == pytest.approx(15**0.75, rel=1e-14)
    assert data["A"] == 0.0 and data["B"] == 0.0
    assert data["c_n"] > 0
    assert json.loads(capsys.readouterr().out)["b"] == data["b"]
    gram = np.loadtxt(out / "gram.csv", delimiter=",")
    assert gram.shape == (15, 15)
    assert gram[0, 0] == pytest.approx(data["c2"], rel=1e-9)
    assert "elapsed" in (out / "run.log").read_text()


def test_constants_byte_identical_rerun(tmp_path):
    _, a = run(tmp_path, "constants", name="a")
    _, b = run(tmp_path, "constants", name="b")
    for f in ("constants.json", "gram.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_constants_cache_reused(tmp_path):
    cache = tmp_path / "cache"
    _, a = run(tmp_path, "constants", "--cache", str(cache), name="a")
    assert len(list(cache.glob("constants-*.json"))) == 1
    _, b = run(tmp_path, "constants", "--cache", str(cache), name="b")
    assert (a / "constants.json").read_bytes() == (b / "constants.json").read_bytes()


@pytest.mark.parametrize(
    "args",
    [
        ["constants", "--set", "n=4"],
        ["constants", "--set", "k=1"],
        ["constants", "--set", "bogus=1"],
        ["ode", "--set", "t0=-1"],
        ["ode", "--set", "forcing=\"wild\""],
        ["phi0", "--set", "time_factors=[0.5]"],
        ["green", "--set", "max_radius=1.5"],
        ["simulate", "--set", "nodes=2"],
        ["simulate", "--set", "unknown=1"],
        ["verify", "--set", "criteria=[99]"],
        ["constants", "--set", "q=[2,0,0,0,0]"],
        ["constants", "--threads", "0"],
    ],
)
def test_validation_failures_exit_1(tmp_path, args, capsys):
    code, _ = run(tmp_path, *args)
    assert code == cli.EXIT_VALIDATION
    assert capsys.readouterr().err.startswith("error:")


def test_config_file_and_override_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"ode": {"n": 6, "samples": 50}}))
    code, out = run(tmp_path, "ode", "--config", str(cfg), "--set", "samples=40")
    assert code == cli.EXIT_OK
    summary = json.loads((out / "ode.json").read_text())
    assert summary["n"] == 6
    assert len((out / "ode.csv").read_text().strip().split("\n")) == 41


def test_bad_config_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert run(tmp_path, "ode", "--config", str(bad))[0] == cli.EXIT_VALIDATION
    assert run(tmp_path, "ode", "--config", str(tmp_path / "missing.json"))[0] == cli.EXIT_VALIDATION


@pytest.mark.parametrize("n", [5, 6])
def test_ode_lambda_slope(tmp_path, n):
    code, out = run(tmp_path, "ode", "--set", f"n={n}")
    assert code == cli.EXIT_OK
    summary = json.loads((out / "ode.json").read_text())
    assert summary["lambda_slope"] == pytest.approx(-(n - 3) / (n - 4), rel=0.02)
    assert (out / "ode.svg").read_text().startswith("<svg")


def test_ode_model_forcing(tmp_path):
    code, out = run(tmp_path, "ode", "--set", "forcing=\"model\"", "--set", "amplitude=0.5", "--set", "samples=60")
    assert code == cli.EXIT_OK
    assert "lambda_slope" in json.loads((out / "ode.json").read_text())


def test_ode_off_centre_drift(tmp_path):
    code, out = run(tmp_path, "ode", "--set", "q=[0.2,0,0,0,0]", "--set", "samples=60")
    assert code == cli.EXIT_OK
    summary = json.loads((out / "ode.json").read_text())
    assert summary["n"] == 5 and np.isfinite(summary["lambda_slope"])


def test_phi0_outputs(tmp_path):
    code, out = run(tmp_path, "phi0", "--set", "time_factors=[2, 10]")
    assert code == cli.EXIT_OK
    rows = (out / "phi0.csv").read_text().strip().split("\n")
    assert rows[0] == "t,phi0,limit" and len(rows) == 3
    values = [float(r.split(",")[1]) for r in rows[1:]]
    assert all(np.isfinite(values))
    summary = json.loads((out / "phi0.json").read_text())
    assert summary["final_gap_over_scale"] < 1e-2


def test_green_ball_matches_image_formula(tmp_path):
    code, out = run(tmp_path, "green", "--set", "count=4", "--cache", str(tmp_path / "cache"))
    assert code == cli.EXIT_OK
    summary = json.loads((out / "green.json").read_text())
    assert summary["points"] == 5
    assert summary["max_relative_error"] < 1e-4
    assert summary["H_first_point"] == pytest.approx(15**0.75, rel=1e-4)
    assert len((out / "green.csv").read_text().strip().split("\n")) == 6


def test_green_explicit_points(tmp_path):
    code, out = run(tmp_path, "green", "--set", "points=[[0.1,0,0,0,0]]", "--set", "n_sources=512", "--set", "n_boundary=2048")
    assert code == cli.EXIT_OK
    assert json.loads((out / "green.json").read_text())["points"] == 1


def test_environment_directories(tmp_path, monkeypatch):
    out = tmp_path / "env_out"
    cache = tmp_path / "env_cache"
    monkeypatch.setenv("CRITBLOWUP_OUT", str(out))
    monkeypatch.setenv("CRITBLOWUP_CACHE", str(cache))
    assert cli.main(["constants", "--set", "gram=false"]) == cli.EXIT_OK
    assert (out / "constants.json").exists()
    assert not (out / "gram.csv").exists()
    assert list(cache.glob("constants-*.json"))


def test_simulate_small_run(tmp_path):
    code, out = run(tmp_path, "simulate", "--set", "amplitude=0.1", "--set", "nodes=100", "--set", "records=6")
    assert code == cli.EXIT_OK
    summary = json.loads((out / "simulate.json").read_text())
    assert summary["outcome"] == "decay"
    assert summary["config"]["nodes"] == 100
    assert len((out / "simulate.csv").read_text().strip().split("\n")) == 7


def test_verify_passing_criterion(tmp_path, capsys):
    code, out = run(tmp_path, "verify", "--set", "criteria=[3]")
    assert code == cli.EXIT_OK
    summary = json.loads((out / "verify.json").read_text())
    assert summary["failed"] == 0 and summary["passed"] >= 2
    assert "PASS" in capsys.readouterr().out


def test_verify_failing_criterion_exit_3(tmp_path):
    code, out = run(tmp_path, "verify", "--set", "criteria=[4]")
    assert code == cli.EXIT_CRITERION
    assert json.loads((out / "verify.json").read_text())["failed"] >= 1


def test_config_hash_stable():
    a = cli.RunConfig.build("ode", {"n": 6})
    b = cli.RunConfig.build("ode", {"n": 6})
    c = cli.RunConfig.build("ode", {"n": 6}, seed=1)
    assert a.content_hash() == b.content_hash() != c.content_hash()

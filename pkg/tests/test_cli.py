import csv
import json
import math
import os

import numpy as np
import pytest

from gfom_coupling import ConfigInvalid, ar_alpha_sq
from gfom_coupling.cli import main as cli_main
from gfom_coupling.cli.config import (
    ENV_OUT,
    ENV_THREADS,
    PRESETS,
    SCHEMA,
    build_config,
    parse_config_text,
    with_overrides,
)
from gfom_coupling.cli.runner import ExperimentAborted, csv_columns, run_experiment, sweep
from gfom_coupling.cli.verify import format_report, run_checks

main = cli_main.main

SMALL_LINEAR = """
kind = linear
n = 40, 60
T = 3
trials = 4
se_source = closed_form
design = orthonormal
lam = 0.5
r_grid = 1, 2
seed = 11
"""

SMALL_AMP = """
kind = amp-tanh
n = 50
T = 3
trials = 3
K = 200
psi_K = 200
sigma_scale = 1, 2
seed = 12
"""


def _write(tmp_path, text, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _bodies(out):
    return {name: open(os.path.join(out, name), "rb").read()
            for name in ("coupling_errors.csv", "exceedance.csv", "wasserstein.csv")}


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- config

def test_parse_flat_text():
    raw = parse_config_text("# comment\nkind = linear\nn = 10,20\nT = 2\n")
    assert raw == {"kind": "linear", "n": "10,20", "T": "2"}
    raw = parse_config_text("[experiment]\nseed = 5\n")
    assert raw == {"seed": "5"}


def test_parse_error_is_config_invalid():
    with pytest.raises(ConfigInvalid):
        parse_config_text("kind = linear\nkind = amp-tanh\n")


def test_field_level_errors():
    with pytest.raises(ConfigInvalid) as info:
        build_config({"kind": "nope", "n": "2", "T": "3", "trials": "0", "bogus": "1",
                      "seed": "1"}, env={})
    fields = {k for k, _ in info.value.errors}
    assert "bogus" in fields
    with pytest.raises(ConfigInvalid) as info:
        build_config({"kind": "nope", "n": "2", "T": "3", "trials": "0", "seed": "1"}, env={})
    fields = {k for k, _ in info.value.errors}
    assert {"kind", "n", "trials"} <= fields


def test_seed_is_mandatory():
    with pytest.raises(ConfigInvalid) as info:
        build_config({"kind": "linear", "n": "10", "T": "2", "trials": "1"}, env={})
    assert ("seed" in {k for k, _ in info.value.errors})


def test_presets_validate():
    for name in PRESETS:
        cfg = build_config(preset=name, env={})
        assert cfg.preset == name and cfg.seed is not None
    cfg = build_config(preset="linear-ar", env={})
    assert (cfg.lam, cfg.T, cfg.n, cfg.trials) == (0.5, 4, (500,), 200)
    assert set(build_config(preset="matched-amp-tanh", env={}).n) == {250, 1000, 4000}


def test_precedence_and_env_scope():
    env = {ENV_THREADS: "3", ENV_OUT: "/tmp/x", "GFOM_COUPLING_SEED": "99"}
    cfg = build_config({"seed": "5", "threads": "1"}, preset="linear-ar", env=env)
    assert cfg.threads == 3 and cfg.out == "/tmp/x" and cfg.seed == 5
    cfg = build_config({"seed": "5"}, preset="linear-ar", overrides={"threads": 2}, env=env)
    assert cfg.threads == 2
    with pytest.raises(ConfigInvalid):
        build_config(preset="linear-ar", env={ENV_THREADS: "many"})


def test_schema_documents_every_key():
    for key, (parser, doc) in SCHEMA.items():
        assert callable(parser) and doc


# ---------------------------------------------------------------- runs

def test_linear_run_artifacts(tmp_path):
    cfg = build_config(parse_config_text(SMALL_LINEAR), env={})
    out = str(tmp_path / "run")
    manifest = run_experiment(cfg, out)
    assert manifest["status"] == "complete"
    for name in ("coupling_errors.csv", "exceedance.csv", "wasserstein.csv", "se_params.json",
                 "manifest.json"):
        assert os.path.exists(os.path.join(out, name))
    rows = _rows(os.path.join(out, "coupling_errors.csv"))
    assert len(rows) == 8
    assert list(rows[0]) == csv_columns(3)["coupling_errors.csv"]
    for row in rows:
        assert float(row["identity_residual"]) <= 1e-8
        assert math.isclose(float(row["coupling_error"]) ** 2, float(row["coupling_error_sq"]),
                            rel_tol=1e-12)
    wass = _rows(os.path.join(out, "wasserstein.csv"))
    for row in wass:
        assert row["trial_id"] == "-1"
        t = int(row["t"])
        assert abs(float(row["alpha_sq"]) - ar_alpha_sq(0.5, t + 1)) <= 1e-12
    exc = _rows(os.path.join(out, "exceedance.csv"))
    assert len(exc) == 16 and {r["r"] for r in exc} == {"1", "2"}
    disk = json.load(open(os.path.join(out, "manifest.json")))
    assert disk["csv_sha256"] == manifest["csv_sha256"]
    assert disk["config"]["seed"] == 11


def test_every_row_carries_identity_columns(tmp_path):
    cfg = build_config(parse_config_text(SMALL_AMP), env={})
    out = str(tmp_path / "amp")
    manifest = run_experiment(cfg, out)
    for name in ("coupling_errors.csv", "exceedance.csv"):
        for row in _rows(os.path.join(out, name)):
            assert row["seed"] == "12" and row["n"] == "50" and row["T"] == "3"
            assert row["trial_id"] != "" and row["sigma_scale"] in ("1", "2")
    params = json.load(open(os.path.join(out, "se_params.json")))
    psi = {g["sigma_scale"]: g["psi"] for g in params["groups"]}
    # doubling Sigma halves S, so psi2 is large only in the mismatched group
    assert psi[2.0]["psi2"] > psi[1.0]["psi2"]
    assert manifest["summaries"]


def test_deterministic_across_runs_and_threads(tmp_path):
    cfg = build_config(parse_config_text(SMALL_AMP), env={})
    a = _bodies(run_experiment(cfg, str(tmp_path / "a")) and str(tmp_path / "a"))
    b = _bodies(run_experiment(cfg, str(tmp_path / "b")) and str(tmp_path / "b"))
    c = _bodies(run_experiment(with_overrides(cfg, threads=4), str(tmp_path / "c"))
                and str(tmp_path / "c"))
    assert a == b == c


def test_failed_run_leaves_marker(tmp_path):
    text = """
kind = custom
n = 8
T = 2
trials = 2
se_source = explicit
sigma = [[1, 0], [0, 1]]
b = [[0, 0], [0, 0]]
f = [{"kind": "constant", "value": "ones"}, {"kind": "linear", "coeffs": {"0": 1e308}}]
g = [{"kind": "constant", "value": "zeros"}, {"kind": "constant", "value": "zeros"}]
seed = 3
"""
    path = _write(tmp_path, text)
    out = str(tmp_path / "bad")
    code = main(["run", "--config", path, "--out", out])
    assert code == 3
    assert os.path.exists(os.path.join(out, "FAILED"))
    manifest = json.load(open(os.path.join(out, "manifest.json")))
    assert manifest["status"] == "failed" and "NonFinite" in manifest["error"]
    assert os.path.exists(os.path.join(out, "coupling_errors.csv"))
    with pytest.raises(ExperimentAborted):
        run_experiment(build_config(parse_config_text(text), env={}), out)


def test_oracle_kind(tmp_path):
    cfg = build_config(preset="oracle-suite", overrides={"n": (60,)}, env={})
    out = str(tmp_path / "oracle")
    manifest = run_experiment(cfg, out)
    assert manifest["checks_passed"] is True
    assert len(_rows(os.path.join(out, "checks.csv"))) == 15


# ---------------------------------------------------------------- command line

def test_run_subcommand(tmp_path, capsys):
    path = _write(tmp_path, SMALL_LINEAR)
    out = str(tmp_path / "cli")
    assert main(["run", "--config", path, "--out", out, "--seed", "5", "--threads", "2"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["status"] == "complete"
    assert json.load(open(os.path.join(out, "manifest.json")))["config"]["seed"] == 5


def test_run_env_out(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(ENV_OUT, str(tmp_path / "envout"))
    path = _write(tmp_path, SMALL_LINEAR)
    assert main(["run", "--config", path]) == 0
    assert os.path.exists(tmp_path / "envout" / "manifest.json")


def test_config_errors_exit_2(tmp_path, capsys):
    path = _write(tmp_path, "kind = linear\nn = 1\nT = 3\ntrials = 1\nseed = 1\n")
    assert main(["run", "--config", path]) == 2
    assert "config error [n]" in capsys.readouterr().err
    assert main(["run"]) == 2
    assert main(["sweep", "--preset", "linear-ar", "--param", "out", "--values", "a"]) == 2


def test_verify_passes_and_is_reproducible(capsys):
    assert main(["verify", "--seed", "3", "--size", "120"]) == 0
    first = capsys.readouterr().out
    assert main(["verify", "--seed", "3", "--size", "120"]) == 0
    assert capsys.readouterr().out == first
    assert first.strip().endswith("15/15 checks passed")


def test_verify_fault_injection(capsys):
    assert main(["verify", "--seed", "3", "--size", "120", "--inject-fault", "corrupt-aprime"]) == 1
    out = capsys.readouterr().out
    assert "FAIL coupling_identity" in out
    assert out.count("FAIL") == 1


def test_run_checks_api():
    checks = run_checks(4, n=100)
    assert all(c.passed for c in checks)
    assert format_report(checks).count("PASS") == len(checks)
    with pytest.raises(ValueError):
        run_checks(4, fault="bogus")


def test_sweep_subcommand(tmp_path, capsys):
    path = _write(tmp_path, SMALL_LINEAR)
    out = str(tmp_path / "sw")
    assert main(["sweep", "--config", path, "--out", out, "--param", "lam",
                 "--values", "0.5,1.0"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines == ["complete lam=0.5", "complete lam=1.0"]
    for lam in ("0.5", "1.0"):
        wass = _rows(os.path.join(out, f"lam={lam}", "wasserstein.csv"))
        t3 = [r for r in wass if r["t"] == "2"][0]
        assert abs(float(t3["alpha_sq"]) - ar_alpha_sq(float(lam), 3)) <= 1e-12


def test_sweep_api(tmp_path):
    cfg = build_config(parse_config_text(SMALL_LINEAR), env={})
    ms = sweep(cfg, "trials", ["1", "2"], str(tmp_path / "s"))
    assert [m["config"]["trials"] for m in ms] == [1, 2]

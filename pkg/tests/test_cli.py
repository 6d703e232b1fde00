from __future__ import annotations

import csv
import io
import json
import subprocess
import sys

import jsonschema
import pytest

from defectlab import cli, report
from defectlab.errors import NonConvergence
from defectlab.report import ConfigError, RunConfig

SMALL = ["--n-elements", "200", "--radius", "10"]


def run_cli(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def strip_times(path):
    d = json.loads(path.read_text())
    d.pop("wall_times")
    return d


def test_diagnose_ok(capsys, tmp_path):
    code, out, _ = run_cli(["diagnose", *SMALL, "--out", str(tmp_path)], capsys)
    assert code == cli.EXIT_OK
    assert "verdict: pass" in out
    rep = json.loads((tmp_path / "report.json").read_text())
    report.validate_report(rep)
    assert (tmp_path / "profile.csv").read_text().startswith("r,u,v,du,dv\n")


@pytest.mark.parametrize(
    "argv",
    [
        ["diagnose", "--a2", "-1"],
        ["diagnose", "--radius", "ten"],
        ["diagnose", "--grading", "spiral:2"],
        ["diagnose", "--analyses", "nonsense"],
        ["diagnose", "--n-elements", "2"],
        ["sweep", "--axis", "colour"],
        ["frobnicate"],
    ],
)
def test_config_errors_exit_2(argv, capsys):
    # argparse errors exit through SystemExit, config validation returns the code
    try:
        code = cli.main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code == cli.EXIT_CONFIG


def test_missing_config_file_exit_2(tmp_path, capsys):
    code, _, err = run_cli(["solve", "--config", str(tmp_path / "absent.json")], capsys)
    assert code == cli.EXIT_CONFIG and "config error" in err


def test_nonconvergence_exit_3(capsys):
    code, _, err = run_cli(["solve", "--n-elements", "32", "--radius", "10", "--tol", "1e-300"], capsys)
    assert code == cli.EXIT_NONCONVERGENCE
    assert "solve" in err


def test_numeric_failure_exit_4(capsys, monkeypatch):
    def broken(*args, **kwargs):
        raise FloatingPointError("overflow in residual")

    monkeypatch.setattr(report.radial, "solve_profile", broken)
    code, _, err = run_cli(["solve", *SMALL], capsys)
    assert code == cli.EXIT_NUMERIC and "FloatingPointError" in err


def test_nonconvergence_inside_stage_maps_to_3(monkeypatch, capsys):
    def broken(*args, **kwargs):
        raise NonConvergence("stalled", last_iterate=None, residual=1.0)

    monkeypatch.setattr(report.radial, "solve_profile", broken)
    assert run_cli(["solve", *SMALL], capsys)[0] == cli.EXIT_NONCONVERGENCE


def test_deterministic_reports(tmp_path, capsys):
    argv = ["stability", *SMALL, "--seed", "5", "--n-random", "3"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli([*argv, "--out", str(a)], capsys)[0] == 0
    assert run_cli([*argv, "--out", str(b)], capsys)[0] == 0
    da, db = strip_times(a / "report.json"), strip_times(b / "report.json")
    da["config"].pop("out")
    db["config"].pop("out")
    assert da == db
    assert (a / "profile.csv").read_bytes() == (b / "profile.csv").read_bytes()


def test_schema_rejects_bad_report(tmp_path, capsys):
    run_cli(["diagnose", *SMALL, "--out", str(tmp_path)], capsys)
    rep = json.loads((tmp_path / "report.json").read_text())
    rep["verdicts"][0]["status"] = "maybe"
    with pytest.raises(jsonschema.ValidationError):
        report.validate_report(rep)
    del rep["wall_times"]
    with pytest.raises(jsonschema.ValidationError):
        report.validate_report(rep)


def test_config_round_trip():
    cfg = RunConfig(a2=0.3, b2=2.0, radius=12.5, analyses=("diagnose", "modes"), seed=9)
    assert RunConfig.from_json(cfg.to_json()) == cfg
    assert RunConfig(radius=float("inf")).radius == "inf"
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"a2": 1.0, "colour": "red"})


def test_flags_override_config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"b2": 1.5, "radius": 10.0, "seed": 4}))
    ap = cli.build_parser()
    cfg = cli.config_from_args(ap.parse_args(["diagnose", "--config", str(path)]))
    assert cfg.b2 == 1.5 and cfg.seed == 4 and cfg.radius == 10.0
    cfg = cli.config_from_args(ap.parse_args(["diagnose", "--config", str(path), "--b2", "2"]))
    assert cfg.b2 == 2.0 and cfg.seed == 4
    assert cfg.analyses == ("diagnose",)


def test_empty_sweep(capsys):
    code, out, _ = run_cli(["sweep", "--axis", "b2", *SMALL], capsys)
    assert code == 0
    assert out.splitlines()[0] == ",".join(report.SWEEP_COLUMNS)
    assert "0 runs" in out


def test_sweep_b2_q1_sign_flip(tmp_path, capsys):
    argv = ["sweep", "--axis", "b2", "--values", "1.5", "2.0", "--n-elements", "500", "--r-eff", "40", "--out", str(tmp_path)]
    code, out, _ = run_cli(argv, capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "sweep.csv").read_text())))
    assert [r["status"] for r in rows] == ["ok", "ok"]
    assert float(rows[0]["q1_hat"]) < 0 < float(rows[1]["q1_hat"])
    assert (tmp_path / "run_001.json").exists()


def test_sweep_parallel_matches_serial():
    base = RunConfig(radius=10.0, n_elements=100)
    serial, _ = report.sweep(base, "b2", [0.8, 1.2], jobs=1)
    parallel, _ = report.sweep(base, "b2", [0.8, 1.2], jobs=2)
    assert serial == parallel


def test_critical_configuration(tmp_path, capsys):
    argv = ["diagnose", "--b2", "1.7320508075688772", "--radius", "20", "--n-elements", "400", "--out", str(tmp_path)]
    code, out, _ = run_cli(argv, capsys)
    assert code == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["constants"]["regime"] == "Critical"
    assert rep["diagnostics"]["critical_v_constant_ok"] is True
    assert any(v["name"] == "critical_v_constant" and v["status"] == "pass" for v in rep["verdicts"])


def test_k2_modes_negative(tmp_path, capsys):
    argv = ["modes", "--k", "2", "--r-eff", "40", "--n-elements", "500", "--m-max", "3", "--out", str(tmp_path)]
    code, _, _ = run_cli(argv, capsys)
    assert code == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert min(e["lambda_min"] for e in rep["mode_scan"]) < 0
    assert all(e["extension_flag"] for e in rep["mode_scan"])
    assert (tmp_path / "mode_scan.csv").read_text().startswith("sector,m_or_n,k,lambda_min,extension_flag\n")


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "defectlab", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "sweep" in res.stdout


def test_asymptotic_fit_asserted_only_far_out():
    status = {}
    for r_eff in ("20", "60"):
        rep = report.run(RunConfig(n_elements=1000, r_eff=float(r_eff)), write=False)
        status[r_eff] = next(v["status"] for v in rep.verdicts if v["name"] == "asymptotic_fit")
    assert status == {"20": "info", "60": "pass"}

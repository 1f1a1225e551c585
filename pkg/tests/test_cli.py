import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from hvolterra.cli import main
from hvolterra.config import ConfigError, GridConfig, parse_config
from hvolterra.report import emit, load_schema, parse_report_csv, report_csv, report_dict, validate_report, write_atomic
from hvolterra.suites import SUITES, Check, SuiteResult, list_suites, run_suite

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


# -- config parsing ---------------------------------------------------------------

def test_defaults_fill_in():
    cfg = parse_config("suite: wave\n")
    assert cfg.grid == GridConfig()
    assert cfg.seeds == (0,) and cfg.sigma["type"] == "deterministic"


@pytest.mark.parametrize(
    "text,line,needle",
    [
        ("suite: ito\ngrid:\n  N: -4\n", 3, "grid.N"),
        ("suite: ito\ngrid:\n  N: 8\n  d_max: 1\n", 4, "d_max >= 2"),
        ("suite: smg\nbogus: 1\n", 2, "unknown key"),
        ("suite: nope\n", 1, "unknown suite"),
        ("suite: smg\ngrid:\n  T: 0\n", 3, "grid.T"),
        ("suite: smg\nsigma: {type: rough}\n", 2, "sigma"),
        ("suite: smg\nseeds: [1, x]\n", 2, "seeds"),
        ("suite: smg\ntolerances:\n  a: big\n", 3, "tolerance"),
        ("suite: smg\nkernel: [{type: exp}, {params: {}}]\n", 2, "type"),
        ("suite: smg\n\tgrid: 1\n", 2, "YAML syntax"),
    ],
)
def test_validation_reports_line(text, line, needle):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "s.yaml")
    assert info.value.line == line
    assert needle in str(info.value)
    assert str(info.value).startswith(f"s.yaml:{line}:")


def test_overrides():
    cfg = parse_config("suite: smg\nseeds: [1, 2]\n").with_overrides("wave", 9)
    assert cfg.suite == "wave" and cfg.seeds == (9,)
    with pytest.raises(ConfigError):
        cfg.with_overrides("nope")


# -- reports ----------------------------------------------------------------------

def fake_result():
    return SuiteResult("wave", [Check("wave", "a", "eq:rho", 1e-12, 1e-8), Check("wave", "b", "eq:rho", 2.0, 2.5, 1.6)],
                       [{"quantity": "a", "N": 8, "value": 0.5}], {"x": 1.0}, 0.1)


def test_csv_round_trip():
    res = fake_result()
    text = report_csv(res)
    assert text.splitlines()[0] == "suite,check,paper_ref,value,tol,pass"
    back = parse_report_csv(text)
    assert [(c.name, c.value, c.tol, c.lower) for c in back] == [(c.name, c.value, c.tol, c.lower) for c in res.checks]
    with pytest.raises(ValueError):
        parse_report_csv(text.replace("true", "false", 1))


def test_json_report_matches_schema():
    data = report_dict(fake_result(), seeds=[1])
    validate_report(data)
    assert load_schema()["title"]
    data["records"][0]["pass"] = "yes"
    import jsonschema

    with pytest.raises(jsonschema.ValidationError):
        validate_report(data)


def test_failed_render_leaves_no_files(tmp_path, monkeypatch):
    import hvolterra.report as report

    def boom(*a, **k):
        raise RuntimeError("render failed")

    monkeypatch.setattr(report, "refinement_csv", boom)
    with pytest.raises(RuntimeError):
        emit(fake_result(), tmp_path / "out")
    assert list((tmp_path / "out").iterdir()) == []


def test_atomic_write_keeps_old_file_on_error(tmp_path, monkeypatch):
    target = tmp_path / "r.csv"
    target.write_text("old")

    def bad_replace(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", bad_replace)
    with pytest.raises(OSError):
        write_atomic(target, "new")
    assert target.read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["r.csv"]


# -- command line ----------------------------------------------------------------

def test_list_suites(capsys):
    assert main(["list-suites"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in out] == list(SUITES)
    assert list_suites().count("\n") == len(SUITES) - 1


def test_run_writes_csv_and_refinement(tmp_path, capsys):
    out = tmp_path / "rep"
    assert main(["run", str(CONFIGS / "wave.yaml"), "--out", str(out)]) == 0
    report = (out / "wave-report.csv").read_text()
    assert all(c.passed for c in parse_report_csv(report))
    assert (out / "wave-refinement.csv").read_text().startswith("suite,quantity,N,value")
    assert "PASS" in capsys.readouterr().out


def test_csv_is_byte_identical_across_runs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["run", str(CONFIGS / "smg.yaml"), "--out", str(d), "--quiet"]) == 0
    for name in ("smg-report.csv", "smg-refinement.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_json_output_validates(tmp_path):
    assert main(["run", str(CONFIGS / "wave.yaml"), "--format", "json", "--out", str(tmp_path), "--quiet"]) == 0
    data = json.loads((tmp_path / "wave-report.json").read_text())
    validate_report(data)
    assert data["environment"]["seeds"] == [3]
    assert data["notes"]["moment_check"]["status"] == "flagged"


def test_tight_tolerance_fails(tmp_path):
    assert main(["run", str(CONFIGS / "wave.yaml"), "--out", str(tmp_path), "--tolerance-scale", "1e-12",
                 "--quiet"]) == 1


def test_config_error_exit_and_no_output(tmp_path, capsys):
    cfg = write(tmp_path, "suite: ito\ngrid:\n  N: 0\n")
    out = tmp_path / "never"
    assert main(["run", str(cfg), "--out", str(out)]) == 2
    err = capsys.readouterr().err
    assert f"{cfg}:3:" in err
    assert not out.exists()


@pytest.mark.parametrize("argv", [["frobnicate"], ["run"], ["run", "x.yaml", "--format", "xml"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == 2


def test_missing_file_and_bad_suite_override(tmp_path):
    assert main(["run", str(tmp_path / "absent.yaml")]) == 2
    assert main(["run", str(CONFIGS / "wave.yaml"), "--suite", "nope", "--out", str(tmp_path)]) == 2
    assert main(["run", str(CONFIGS / "wave.yaml"), "--tolerance-scale", "0", "--out", str(tmp_path)]) == 2


def test_bad_kernel_descriptor_is_config_error(tmp_path):
    cfg = write(tmp_path, "suite: smg\nkernel: {type: spline}\n")
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hvolterra.cli", "list-suites"], capture_output=True, text=True)
    assert proc.returncode == 0 and "fbm-variance" in proc.stdout


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.yaml")))
def test_shipped_configs_parse(name):
    cfg = parse_config((CONFIGS / name).read_text(), name, str(CONFIGS))
    assert cfg.suite in SUITES


def test_random_sigma_config_runs():
    cfg = parse_config((CONFIGS / "x-identities-random-sigma.yaml").read_text(), "x", str(CONFIGS))
    assert run_suite(cfg).passed

import json

import jsonschema
import pytest

from fiberlab import cli


def run(argv, capsys=None):
    code = cli.main(argv)
    out = capsys.readouterr() if capsys else None
    return code, out


def test_list_scenarios(capsys):
    code, out = run(["list-scenarios"], capsys)
    assert code == 0
    text = out.out
    assert "s2-hopf" in text and "nonabelian bracket table" in text
    assert "s3-frame-sphere" in text and "canonical-lift and horizontal-lift relations" in text
    code, out = run(["list-scenarios", "--json"], capsys)
    rows = json.loads(out.out)
    assert [r["id"] for r in rows] == ["s1-abelian-kk", "s2-hopf", "s3-frame-flat", "s3-frame-sphere"]
    code, out = run(["list-scenarios", "frame-sphere", "--json"], capsys)
    assert len(json.loads(out.out)) == 1


def test_emit_schema(capsys):
    code, out = run(["emit-schema"], capsys)
    schema = json.loads(out.out)
    jsonschema.Draft202012Validator.check_schema(schema)
    jsonschema.validate(cli.DEFAULTS, schema)
    code, out = run(["emit-schema", "--kind", "report"], capsys)
    assert json.loads(out.out)["properties"]["schema"]["const"] == "report-v1"


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"grid": {"dt": -1}}))
    code, out = run(["run", "--config", str(bad)], capsys)
    assert code == cli.EXIT_CONFIG and "grid/dt" in out.err
    bad.write_text("{not json")
    assert run(["run", "--config", str(bad)])[0] == cli.EXIT_CONFIG
    code, _ = run(["run", "--scenario", "s1-abelian-kk", "--param", "bogus=1", "--output-dir", str(tmp_path)])
    assert code == cli.EXIT_CONFIG
    code, _ = run(["run", "--test", "martingale", "-N", "10", "--output-dir", str(tmp_path)])
    assert code == cli.EXIT_CONFIG
    report = json.loads((tmp_path / "report.json").read_text())
    assert "N >= 100" in report["error"] and report["exit_code"] == 3


def test_precedence_and_env(tmp_path, monkeypatch):
    f = tmp_path / "cfg.json"
    f.write_text(json.dumps({"N": 500, "seed": 3, "grid": {"T": 2.0}}))
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env-out"))
    cfg = cli.resolve_config(json.loads(f.read_text()), {"N": 700, "grid": {"dt": 0.02}})
    assert cfg["N"] == 700 and cfg["seed"] == 3 and cfg["grid"] == {"T": 2.0, "dt": 0.02}
    assert cfg["output_dir"] == str(tmp_path / "env-out")
    assert cli.resolve_config({"tests": ["all"]}, {})["tests"] == list(cli.TESTS)


def test_static_run_is_reproducible(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    outs = []
    for i in range(2):
        d = tmp_path / f"o{i}"
        code, _ = run(["run", "--scenario", "s1-abelian-kk", "--test", "static-identities", "--samples", "200",
                       "--output-dir", str(d), "--quiet"])
        assert code == cli.EXIT_PASS
        outs.append((d / "report.json").read_text())
    a, b = (json.loads(o) for o in outs)
    a["config"].pop("output_dir"), b["config"].pop("output_dir")
    assert a == b
    jsonschema.validate(a, cli.REPORT_SCHEMA)
    assert a["suites"]["static-identities"]["lemma_identities"]["max"] < 1e-7
    monkeypatch.delenv("SOURCE_DATE_EPOCH")
    d = tmp_path / "o0"
    run(["run", "--scenario", "s1-abelian-kk", "--test", "static-identities", "--samples", "200",
         "--output-dir", str(d), "--quiet"])
    c = json.loads((d / "report.json").read_text())
    c.pop("generated_at"), a.pop("generated_at")
    c["config"].pop("output_dir")
    assert c == a


@pytest.mark.slow
def test_martingale_runs(tmp_path):
    d = tmp_path / "ok"
    code, _ = run(["run", "--scenario", "s1-abelian-kk", "--test", "martingale", "--drivers", "horizontal-brownian",
                   "-N", "1000", "--output-dir", str(d), "--write-paths", "--quiet"])
    assert code == cli.EXIT_PASS
    assert (d / "bins.csv").read_text().startswith("process,bin,t_start")
    assert (d / "paths.csv").exists()
    d = tmp_path / "drift"
    code, _ = run(["run", "--scenario", "s1-abelian-kk", "--test", "martingale", "--drivers",
                   "horizontal-brownian-drift", "-N", "2000", "--output-dir", str(d), "--quiet"])
    assert code == cli.EXIT_REJECT


def test_numerical_failure_exit_code(tmp_path):
    code, _ = run(["run", "--scenario", "s2-hopf", "--test", "martingale", "-N", "100", "--dt", "0.5",
                   "--output-dir", str(tmp_path), "--quiet"])
    assert code == cli.EXIT_NUMERICAL
    assert "RefinementRequired" in json.loads((tmp_path / "report.json").read_text())["error"]

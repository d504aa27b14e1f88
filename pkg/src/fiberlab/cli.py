"""Command line runner: ``fiberlab run | list-scenarios | emit-schema``.

Exit codes: 0 all selected suites pass, 2 a suite rejects, 3 configuration
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from fiberlab import __version__
from fiberlab.errors import ConditioningError, ConfigError, DomainError, FiberlabError, RefinementRequired, SampleSizeError

EXIT_PASS, EXIT_REJECT, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3, 4
OUTPUT_ENV = "FIBERLAB_OUTPUT_DIR"
REPORT_SCHEMA_VERSION = "report-v1"
TESTS = ("martingale", "harmonic", "static-identities")
DRIVER_SETS = ("horizontal-brownian", "vertical-brownian", "mixed-brownian", "horizontal-brownian-drift")

DEFAULTS = {
    "scenario": {"id": "s1-abelian-kk", "params": {}},
    "grid": {"T": 1.0, "dt": 0.01},
    "N": 2000,
    "seed": 20240601,
    "tests": ["static-identities"],
    "drivers": "horizontal-brownian",
    "samples": 1000,
    "output_dir": None,
    "write_paths": False,
    "tolerances": {"static": 1e-7, "sff": 1e-6, "harmonic": 1e-5, "sigma": 4.0, "c_disc": 1.0},
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "fiberlab experiment config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "scenario": {
            "type": "object",
            "additionalProperties": False,
            "required": ["id"],
            "properties": {
                "id": {"enum": ["s1-abelian-kk", "s2-hopf", "s3-frame-flat", "s3-frame-sphere"]},
                "params": {"type": "object"},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"T": {"type": "number", "exclusiveMinimum": 0},
                           "dt": {"type": "number", "exclusiveMinimum": 0}},
        },
        "N": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "tests": {"type": "array", "minItems": 1, "uniqueItems": True,
                  "items": {"enum": list(TESTS) + ["all"]}},
        "drivers": {"enum": list(DRIVER_SETS)},
        "samples": {"type": "integer", "minimum": 1},
        "output_dir": {"type": ["string", "null"]},
        "write_paths": {"type": "boolean"},
        "tolerances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "number", "exclusiveMinimum": 0}
                           for k in ("static", "sff", "harmonic", "sigma", "c_disc")},
        },
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "fiberlab report",
    "type": "object",
    "required": ["schema", "version", "config", "suites", "passed", "exit_code", "generated_at"],
    "properties": {
        "schema": {"const": REPORT_SCHEMA_VERSION},
        "version": {"type": "string"},
        "config": {"type": "object"},
        "suites": {"type": "object"},
        "passed": {"type": "boolean"},
        "exit_code": {"type": "integer"},
        "generated_at": {"type": ["string", "null"], "description": "only field that varies between identical runs"},
        "error": {"type": "string"},
    },
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(exc.message, path=where) from None


def resolve_config(file_cfg: dict | None, flags: dict) -> dict:
    """Defaults, then the file, then command-line flags; validated at each layer."""
    file_cfg = file_cfg or {}
    validate(file_cfg)
    cfg = _merge(DEFAULTS, file_cfg)
    cfg = _merge(cfg, {k: v for k, v in flags.items() if v is not None})
    validate(cfg)
    if "all" in cfg["tests"]:
        cfg["tests"] = list(TESTS)
    cfg["tests"] = [t for t in TESTS if t in cfg["tests"]]
    if cfg["output_dir"] is None:
        cfg["output_dir"] = os.environ.get(OUTPUT_ENV, "fiberlab-out")
    return cfg


def _load_file(path: str | None) -> dict | None:
    if path is None:
        return None
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}", path=str(path)) from None


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


def _drivers(scenario, name: str):
    from fiberlab.stochastic import Driver

    m, k = scenario.bundle.base_dim, scenario.bundle.group.dim
    hor = [Driver("horizontal-frame", (a,)) for a in range(m)]
    ver = [Driver("vertical", tuple(np.eye(k)[b])) for b in range(k)]
    if name == "horizontal-brownian":
        return hor, []
    if name == "vertical-brownian":
        return ver, []
    if name == "mixed-brownian":
        return hor + ver, []
    if name == "horizontal-brownian-drift":
        return hor, [Driver("horizontal-frame", (m - 1,), scale=0.5)]
    raise ConfigError(f"unknown driver set {name!r}", path="drivers")


def static_suite(scenario, cfg: dict) -> dict:
    from fiberlab import analysis, bundles

    tol = cfg["tolerances"]
    rng = np.random.default_rng(cfg["seed"])
    samples = scenario.samples(rng, cfg["samples"])
    ft = scenario.tensors
    lemma = bundles.lemma_identity_suite(ft, samples)
    out = {"lemma_identities": lemma}
    checks = [lemma["max"] < tol["static"]]
    proj = bundles.check_projectable(ft, scenario.sample_points(rng, 8)[:, :scenario.bundle.base_dim],
                                     scenario.group_samples(rng, 3))
    out["projectable"] = {"projectable": proj.projectable, "max_spread": proj.max_spread}
    if proj.projectable:
        sff = bundles.sff_identity_residual(ft, scenario.base_connection, samples)
        out["sff_identity"] = sff
        checks.append(sff < tol["sff"])
    if scenario.k0 is not None:
        table = analysis.corollary1_static_checks(scenario, samples)
        out["kaluza_klein_table"] = table
        checks.append(table["max"] < tol["static"])
    if scenario.bundle.group.name == "GL(2)":
        fb = analysis.frame_bundle_checks(scenario, samples)
        out["frame_bundle"] = fb
        gated = [v for key, v in fb.items() if not key.startswith("canonical: (nabla")]
        checks.append(max(gated) < tol["static"])
    out["passed"] = bool(all(checks))
    return out


def martingale_suite(scenario, cfg: dict, out_dir: Path) -> dict:
    from fiberlab import analysis, io
    from fiberlab.stochastic import TimeGrid, simulate_bundle_semimartingale

    if cfg["N"] < analysis.MIN_PATHS:
        raise SampleSizeError(f"martingale tests need N >= {analysis.MIN_PATHS} (got {cfg['N']}); raise N")
    grid = TimeGrid(cfg["grid"]["T"], cfg["grid"]["dt"])
    drivers, drift = _drivers(scenario, cfg["drivers"])
    ens = simulate_bundle_semimartingale(scenario, drivers, grid, cfg["seed"], cfg["N"], drift=drift,
                                         ito_correction=True)
    tol = cfg["tolerances"]
    rep = analysis.martingale_verdict(ens, scenario, sigma=tol["sigma"], c_disc=tol["c_disc"])
    io.write_bins_csv(rep.te1 + rep.te2, out_dir / "bins.csv")
    if cfg["write_paths"]:
        io.write_ensemble_csv(ens, out_dir / "paths.csv", max_paths=100)
    out = rep.to_dict()
    out["passed"] = rep.consistent
    return out


def harmonic_suite(scenario, cfg: dict) -> dict:
    from fiberlab import analysis

    n = scenario.bundle.dim
    u0 = np.asarray(scenario.bundle.section[0][1](np.zeros(scenario.bundle.base_dim)))
    rng = np.random.default_rng(cfg["seed"])
    v0 = rng.standard_normal(n)
    v0 /= 2 * np.linalg.norm(v0)
    chart = scenario.bundle.section[0][0]
    F = analysis.geodesic_map(scenario, u0, v0, t_max=2.0, chart=chart)
    ts = np.linspace(-1.5, 1.5, 31)[:, None]
    rep = analysis.harmonic_conditions(F, scenario, ts)
    out = rep.to_dict()
    out["passed"] = bool(rep.harmonic(cfg["tolerances"]["harmonic"]))
    return out


def run(cfg: dict) -> tuple[int, dict]:
    """Run the selected suites; returns ``(exit code, report)`` and writes files."""
    from fiberlab.scenarios import build_scenario

    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {"schema": REPORT_SCHEMA_VERSION, "version": __version__, "config": cfg, "suites": {}}
    try:
        try:
            scenario = build_scenario(cfg["scenario"]["id"], **cfg["scenario"].get("params", {}))
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"scenario build failed: {exc}", path="scenario") from None
        if "martingale" in cfg["tests"] and cfg["N"] < 100:
            raise SampleSizeError(f"martingale tests need N >= 100 (got {cfg['N']}); raise N")
        for t in cfg["tests"]:
            if t == "static-identities":
                report["suites"][t] = static_suite(scenario, cfg)
            elif t == "martingale":
                report["suites"][t] = martingale_suite(scenario, cfg, out_dir)
            elif t == "harmonic":
                report["suites"][t] = harmonic_suite(scenario, cfg)
        passed = all(s["passed"] for s in report["suites"].values())
        code = EXIT_PASS if passed else EXIT_REJECT
    except (ConfigError, SampleSizeError) as exc:
        passed, code = False, EXIT_CONFIG
        report["error"] = str(exc)
    except (DomainError, ConditioningError, RefinementRequired, FloatingPointError, FiberlabError) as exc:
        passed, code = False, EXIT_NUMERICAL
        report["error"] = f"{type(exc).__name__}: {exc}"
    report["passed"] = passed
    report["exit_code"] = code
    stamp = os.environ.get("SOURCE_DATE_EPOCH")
    now = _dt.datetime.fromtimestamp(int(stamp), _dt.timezone.utc) if stamp else _dt.datetime.now(_dt.timezone.utc)
    report["generated_at"] = now.isoformat()
    from fiberlab.io import dumps_report

    (out_dir / "report.json").write_text(dumps_report(report))
    return code, report


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fiberlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("--config", help="JSON config file")
    r.add_argument("--scenario", help="scenario id")
    r.add_argument("--param", action="append", default=[], metavar="KEY=VALUE", help="scenario parameter")
    r.add_argument("--test", action="append", choices=list(TESTS) + ["all"], help="suite to run (repeatable)")
    r.add_argument("--drivers", choices=DRIVER_SETS)
    r.add_argument("-N", "--paths", type=int, dest="N")
    r.add_argument("--T", type=float, dest="T")
    r.add_argument("--dt", type=float)
    r.add_argument("--seed", type=int)
    r.add_argument("--samples", type=int)
    r.add_argument("--output-dir")
    r.add_argument("--write-paths", action="store_true", default=None)
    r.add_argument("--quiet", action="store_true")
    ls = sub.add_parser("list-scenarios", help="print the scenario catalog")
    ls.add_argument("filter", nargs="?", default="")
    ls.add_argument("--json", action="store_true")
    es = sub.add_parser("emit-schema", help="print a JSON schema")
    es.add_argument("--kind", choices=("config", "report"), default="config")
    return p


def _flags(ns) -> dict:
    flags: dict = {"tests": ns.test, "drivers": ns.drivers, "N": ns.N, "seed": ns.seed,
                   "samples": ns.samples, "output_dir": ns.output_dir, "write_paths": ns.write_paths}
    grid = {k: v for k, v in (("T", ns.T), ("dt", ns.dt)) if v is not None}
    if grid:
        flags["grid"] = grid
    scen: dict = {}
    if ns.scenario:
        scen["id"] = ns.scenario
    if ns.param:
        params = {}
        for item in ns.param:
            key, sep, val = item.partition("=")
            if not sep:
                raise ConfigError(f"expected KEY=VALUE, got {item!r}", path="--param")
            try:
                params[key] = json.loads(val)
            except json.JSONDecodeError:
                params[key] = val
        scen["params"] = params
    if scen:
        flags["scenario"] = scen
    return flags


def main(argv=None) -> int:
    ns = _parser().parse_args(argv)
    if ns.command == "list-scenarios":
        from fiberlab.scenarios import list_scenarios

        rows = [r for r in list_scenarios() if ns.filter in r["id"] or ns.filter in r["description"]]
        if ns.json:
            print(json.dumps(rows, indent=2))
        else:
            for r in rows:
                params = ", ".join(f"{k}={v}" for k, v in r["defaults"].items())
                print(f"{r['id']:<18} [{params}]\n    {r['description']}")
        return EXIT_PASS
    if ns.command == "emit-schema":
        print(json.dumps(CONFIG_SCHEMA if ns.kind == "config" else REPORT_SCHEMA, indent=2))
        return EXIT_PASS
    try:
        cfg = resolve_config(_load_file(ns.config), _flags(ns))
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    code, report = run(cfg)
    if not ns.quiet:
        for name, suite in report["suites"].items():
            print(f"{name}: {'pass' if suite['passed'] else 'REJECT'}")
        if "error" in report:
            print(f"error: {report['error']}", file=sys.stderr)
        print(f"report: {Path(cfg['output_dir']) / 'report.json'} (exit {code})")
    return code


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""driftmle.py — drift-parameter estimation for ergodic diffusions from high-frequency data."""

import argparse
import copy
import json
import logging
import os
import pathlib
import sys
import time

import jsonschema

from artifacts import atomic_write, config_line, dump_json, read_config_line
from errors import AssumptionFailure, ConfigError, DriftMLEError, ExprError
from est import CSV_HEADER, estimate, standardized_error
from expr import parse
from mc import (TABLE_ALPHAS, TABLE_NS, ExperimentConfig, load_reference_tables,
                render_table, run_experiment)
from model import DiffusionModel, ProbeGrid, check_assumptions, check_lipschitz, invariant_law
from sim import ObservationScheme, load_path, save_path, simulate_path

# ── Logging ──────────────────────────────────────────────────────────────────
# Modules log to children of "driftmle"; handlers live here only.
_logger = logging.getLogger("driftmle")
_logger.setLevel(logging.DEBUG)
_stderr_handler = logging.StreamHandler(sys.stderr)
_stderr_handler.setLevel(logging.WARNING)
_stderr_formatter = logging.Formatter(
    "[%(asctime)s] %(levelname)s: %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S"
)
_stderr_handler.setFormatter(_stderr_formatter)
_logger.addHandler(_stderr_handler)
_file_handler = None  # attached once an output directory exists

# ── Constants & ANSI ─────────────────────────────────────────────────────────

VERSION = "0.3.0"
QUICK_NS = (1000,)
QUICK_ALPHAS = (0.5, 0.9)
SCRIPT_DIR = pathlib.Path(__file__).resolve().parent
ANSI_SUPPORTED = sys.stdout.isatty() and "NO_COLOR" not in os.environ
EXIT_OK = 0

DEFAULT_CONFIG = {
    "model": {"a": "1 - x", "b": "2 + sin(x)", "theta": 2.0, "x0": 1.0},
    "scheme": {"n": 1000, "alpha": 0.5, "substeps": 1, "method": "milstein"},
    "experiment": {"ns": [1000], "alphas": [0.5], "replicates": 100, "master_seed": 42},
    "io": {"out_dir": "runs", "formats": ["csv", "json"]},
}

_ALPHA = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model", "scheme", "experiment", "io"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["a", "b", "theta", "x0"],
            "properties": {
                "a": {"type": "string", "minLength": 1},
                "b": {"type": "string", "minLength": 1},
                "theta": {"type": "number"},
                "x0": {"type": "number"},
            },
        },
        "scheme": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n", "alpha", "substeps", "method"],
            "properties": {
                "n": {"type": "integer", "minimum": 1},
                "alpha": _ALPHA,
                "substeps": {"type": "integer", "minimum": 1},
                "method": {"enum": ["euler", "milstein"]},
            },
        },
        "experiment": {
            "type": "object",
            "additionalProperties": False,
            "required": ["ns", "alphas", "replicates", "master_seed"],
            "properties": {
                "ns": {"type": "array", "minItems": 1,
                       "items": {"type": "integer", "minimum": 1}},
                "alphas": {"type": "array", "minItems": 1, "items": _ALPHA},
                "replicates": {"type": "integer", "minimum": 2},
                "master_seed": {"type": "integer", "minimum": 0,
                                "maximum": 2 ** 64 - 1},
            },
        },
        "io": {
            "type": "object",
            "additionalProperties": False,
            "required": ["out_dir", "formats"],
            "properties": {
                "out_dir": {"type": "string", "minLength": 1},
                "formats": {"type": "array", "uniqueItems": True,
                            "items": {"enum": ["csv", "json", "npz"]}},
            },
        },
    },
}


def _without_required(schema):
    """Schema for a config file, where every section and key is optional."""
    out = {k: v for k, v in schema.items() if k != "required"}
    if "properties" in out:
        out["properties"] = {k: _without_required(v) for k, v in out["properties"].items()}
    return out


FILE_SCHEMA = _without_required(CONFIG_SCHEMA)


class C:
    """ANSI color codes; empty when stdout is not a terminal."""
    RESET   = "\033[0m" if ANSI_SUPPORTED else ""
    BOLD    = "\033[1m" if ANSI_SUPPORTED else ""
    DIM     = "\033[2m" if ANSI_SUPPORTED else ""
    CYAN    = "\033[36m" if ANSI_SUPPORTED else ""
    GREEN   = "\033[32m" if ANSI_SUPPORTED else ""
    YELLOW  = "\033[33m" if ANSI_SUPPORTED else ""
    RED     = "\033[31m" if ANSI_SUPPORTED else ""


_STATUS_COLOR = {"pass": C.GREEN, "fail": C.RED, "inconclusive": C.YELLOW}


# ── Structured error records ─────────────────────────────────────────────────

def _log_error(context, error_type, error_msg, details=None, working_dir=None):
    """Append a structured error record to <working_dir>/errors.log (or stderr).

    Args:
        context: str, where the error occurred (e.g. "experiment", "config:load")
        error_type: str, exception class name
        error_msg: str, exception message
        details: str, optional extra context (field path, JSON record)
        working_dir: Path, output directory holding errors.log (stderr if None)
    """
    timestamp = time.strftime("%Y-%m-%dT%H:%M:%S")
    full_record = {
        "timestamp": timestamp,
        "context": context,
        "error_type": error_type,
        "error_msg": error_msg or "",
        "details": details or "",
    }
    if working_dir:
        log_path = pathlib.Path(working_dir) / "errors.log"
        if log_path.parent.exists():
            try:
                with log_path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(full_record, ensure_ascii=False) + "\n")
                return
            except OSError:
                pass  # fall back to stderr

    truncated_record = {
        "timestamp": timestamp,
        "context": context,
        "error_type": error_type,
        "error_msg": error_msg[:200] if error_msg else "",
        "details": details[:200] if details else "",
    }
    print(f"[error] {json.dumps(truncated_record, ensure_ascii=False)}", file=sys.stderr)


def _attach_file_log(out_dir):
    global _file_handler
    if _file_handler is not None:
        return
    _file_handler = logging.FileHandler(pathlib.Path(out_dir) / "driftmle.log", encoding="utf-8")
    _file_handler.setLevel(logging.DEBUG)
    _file_handler.setFormatter(_stderr_formatter)
    _logger.addHandler(_file_handler)


def _detach_file_log():
    global _file_handler
    if _file_handler is not None:
        _logger.removeHandler(_file_handler)
        _file_handler.close()
        _file_handler = None


# ── Configuration ────────────────────────────────────────────────────────────

def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _validate(instance, schema, source):
    try:
        jsonschema.validate(instance=instance, schema=schema)
    except jsonschema.ValidationError as exc:
        field_path = ".".join(str(p) for p in exc.absolute_path) or source
        raise ConfigError(exc.message, field_path) from None


def _read_config_file(path):
    """Config dict from a JSON config, a JSON artifact or a CSV artifact's echo line."""
    path = pathlib.Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}", "--config")
    if path.suffix == ".csv":
        data = read_config_line(path)
        if data is None:
            raise ConfigError(f"{path} carries no '# config=' line", "--config")
        return data
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}",
                          "--config") from None
    if isinstance(data, dict) and "config" in data and "model" not in data:
        data = data["config"]
    return data


def _flag_overrides(args):
    """Dict of config values set on the command line."""
    out = {}

    def put(section, key, value):
        if value is not None:
            out.setdefault(section, {})[key] = value

    if getattr(args, "case", None) and args.command != "table":
        tables = load_reference_tables()
        if args.case not in tables:
            raise ConfigError(f"unknown case {args.case!r}", "--case")
        out["model"] = dict(tables[args.case]["model"])
    put("scheme", "n", args.n)
    put("scheme", "alpha", args.alpha)
    put("scheme", "substeps", args.substeps)
    put("scheme", "method", args.method)
    put("experiment", "replicates", args.replicates)
    put("experiment", "master_seed", args.seed)
    put("io", "out_dir", args.out)
    if args.command == "experiment":
        put("experiment", "ns", [args.n] if args.n is not None else None)
        put("experiment", "alphas", [args.alpha] if args.alpha is not None else None)
    return out


def load_config(path=None, overrides=None):
    """Effective config: DEFAULT_CONFIG < config file < flag overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        data = _read_config_file(path)
        _validate(data, FILE_SCHEMA, "--config")
        cfg = _merge(cfg, data)
    if overrides:
        cfg = _merge(cfg, overrides)
    _validate(cfg, CONFIG_SCHEMA, "config")
    for key in ("a", "b"):
        try:
            parse(cfg["model"][key])
        except ExprError as exc:
            raise ConfigError(str(exc), f"model.{key}") from None
    return cfg


def _parse_cell(text):
    try:
        fields = dict(part.split("=", 1) for part in text.split(","))
        return int(fields["n"]), float(fields["alpha"])
    except (KeyError, ValueError):
        raise ConfigError(f"expected n=INT,alpha=FLOAT, got {text!r}", "--cell") from None


def _out_dir(cfg):
    out = pathlib.Path(cfg["io"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _attach_file_log(out)
    return out


def _scheme(cfg):
    s = cfg["scheme"]
    return ObservationScheme.from_counts(s["n"], s["alpha"], s["substeps"])


def _probe(args):
    radius = getattr(args, "probe_radius", None)
    return ProbeGrid(radius=radius) if radius else ProbeGrid()


def _require_coverage(report, force):
    """AssumptionFailure unless some sufficient result covers the model."""
    if force or report.applicable_results():
        return
    raise AssumptionFailure(report, report.failed_ids() or ["C7"])


# ── Subcommands ──────────────────────────────────────────────────────────────

def cmd_check(cfg, args):
    model = DiffusionModel.from_config(cfg["model"])
    scheme = _scheme(cfg)
    report = check_assumptions(model, _probe(args))
    law, law_error = None, ""
    try:
        law = invariant_law(model, force=True)
    except DriftMLEError as exc:
        law_error = str(exc)
        _logger.info("invariant law unavailable: %s", exc)
    predicted = law.predicted_std(scheme.n, scheme.alpha) if law else None

    if args.json_output:
        print(json.dumps({
            "model": model.to_dict(),
            "fingerprint": model.fingerprint(),
            "report": report.to_dict(),
            "invariant_law": law.to_dict() if law else {"error": law_error},
            "scheme": scheme.to_dict(),
            "predicted_std": predicted,
            "config": cfg,
        }, indent=2))
    else:
        print(f"{C.BOLD}{C.CYAN}check{C.RESET}  a={cfg['model']['a']}  b={cfg['model']['b']}"
              f"  theta={model.theta:g}  x0={model.x0:g}")
        for chk in report.checks:
            color = _STATUS_COLOR.get(chk.status, "")
            print(f"  {chk.id:3s} {color}{chk.status:12s}{C.RESET} {C.DIM}{chk.witness}{C.RESET}")
        covered = ", ".join(report.applicable_results()) or "none"
        print(f"  bounded coefficients: {report.bounded_coefficients}   covered by: {covered}")
        if law:
            print(f"  G = {law.G:.10g}   E d(xi) = {law.info:.10g}   "
                  f"asymptotic std = {law.asymptotic_std:.6g}")
            print(f"  predicted std of theta_hat at n={scheme.n}, alpha={scheme.alpha:g}: "
                  f"{predicted:.6g}")
        else:
            print(f"  {C.YELLOW}invariant law unavailable: {law_error}{C.RESET}")
    _require_coverage(report, args.force)
    return EXIT_OK


def cmd_simulate(cfg, args):
    model = DiffusionModel.from_config(cfg["model"])
    scheme = _scheme(cfg)
    if not args.force:
        a1 = check_lipschitz(model, _probe(args))
        if a1.status != "pass":
            raise AssumptionFailure(None, ["A1"])
    seed = cfg["experiment"]["master_seed"]
    path = simulate_path(model, scheme, cfg["scheme"]["method"], seed)
    out = _out_dir(cfg)
    written = []
    formats = cfg["io"]["formats"]
    if "csv" in formats:
        written.append(save_path(path, out / "path.csv", config=cfg))
    if "npz" in formats:
        written.append(save_path(path, out / "path.npz", config=cfg))
    if "json" in formats:
        written.append(atomic_write(out / "path.json",
                                    dump_json({"config": cfg, "path": path.header()})))
    print(f"simulated N={scheme.N} observations (T={scheme.horizon:.6g}), "
          f"X_T={path.values[-1]:.6g}")
    for p in written:
        print(f"  {C.DIM}wrote {p}{C.RESET}")
    return EXIT_OK


def cmd_estimate(cfg, args):
    model = DiffusionModel.from_config(cfg["model"])
    if args.path:
        path = load_path(args.path)
        if path.fingerprint != model.fingerprint():
            _logger.warning("path %s was simulated from a different model (%s)",
                            args.path, path.metadata.get("model", path.fingerprint))
    else:
        scheme = _scheme(cfg)
        if not args.force and check_lipschitz(model, _probe(args)).status != "pass":
            raise AssumptionFailure(None, ["A1"])
        path = simulate_path(model, scheme, cfg["scheme"]["method"],
                             cfg["experiment"]["master_seed"])
    result = estimate(path, (model.a, model.b))
    std_err = None
    try:
        law = invariant_law(model, force=args.force)
        std_err = standardized_error(result, model.theta, law.info, path.scheme)
    except DriftMLEError as exc:
        _logger.info("no standardized error: %s", exc)

    record = dict(result.to_dict(), std_err=std_err, scheme=path.scheme.to_dict(), config=cfg)
    if "json" in cfg["io"]["formats"]:
        out = _out_dir(cfg)
        atomic_write(out / "estimate.json", dump_json(record))
    if args.json_output:
        print(json.dumps(record, indent=2))
    else:
        print(",".join(CSV_HEADER))
        print(",".join(str(v) for v in result.csv_row(path.seed, path.scheme, path.scheme_name)))
        if std_err is not None:
            print(f"{C.DIM}standardized error: {std_err:.6g}{C.RESET}")
    return EXIT_OK


def _experiment_config(cfg, model, ns, alphas, case=""):
    exp = cfg["experiment"]
    return ExperimentConfig(model=model, alphas=alphas, ns=ns,
                            replicates=exp["replicates"], method=cfg["scheme"]["method"],
                            master_seed=exp["master_seed"],
                            substeps=cfg["scheme"]["substeps"], case=case)


def cmd_experiment(cfg, args):
    model = DiffusionModel.from_config(cfg["model"])
    exp = _experiment_config(cfg, model, cfg["experiment"]["ns"], cfg["experiment"]["alphas"],
                             case=args.case or "")
    if not args.force:
        _require_coverage(check_assumptions(model, _probe(args)), False)
    out = _out_dir(cfg)
    result = run_experiment(exp, threads=args.threads, force=args.force, echo=cfg)
    formats = cfg["io"]["formats"]
    if "csv" in formats:
        result.write_csv(out / "replicates.csv")
        result.write_standardized_errors(out / "standardized_errors.csv")
    if "json" in formats:
        result.write_json(out / "summary.json")
    print(render_table(result, title=f"{model.to_dict()['a']} | {model.to_dict()['b']}"), end="")
    print(f"{C.DIM}info = {result.info:.10g}; artifacts in {out}{C.RESET}")
    return EXIT_OK


def table_grid(cell=None, quick=False):
    """(ns, alphas) for `table`: one cell, the quick subset, or the published 6 x 3 grid."""
    if cell:
        n, alpha = _parse_cell(cell)
        return [n], [alpha]
    if quick:
        return list(QUICK_NS), list(QUICK_ALPHAS)
    return list(TABLE_NS), list(TABLE_ALPHAS)


def cmd_table(cfg, args):
    tables = load_reference_tables()
    cases = [args.case] if args.case else sorted(tables)
    for case in cases:
        if case not in tables:
            raise ConfigError(f"unknown case {case!r}", "--case")
    ns, alphas = table_grid(args.cell, args.quick)

    out = _out_dir(cfg)
    grid = f"# grid: n in {ns}, alpha in {alphas}, {cfg['experiment']['replicates']} replicates"
    text, summary = [config_line(cfg), grid], {"config": cfg, "cases": {}}
    for case in cases:
        entry = tables[case]
        model = DiffusionModel.from_config(entry["model"])
        exp = _experiment_config(cfg, model, ns, alphas, case=case)
        if not args.force:
            _require_coverage(check_assumptions(model, _probe(args)), False)
        result = run_experiment(exp, threads=args.threads, force=args.force,
                                reference=entry["cells"], echo=cfg)
        block = render_table(result, entry["cells"], title=f"Case {case}: {entry['title']}")
        print(block)
        text.append(block)
        summary["cases"][case] = result.to_dict()
    atomic_write(out / "table.txt", "\n".join(text) + "\n")
    atomic_write(out / "summary.json", dump_json(summary))
    print(f"{C.DIM}artifacts in {out}{C.RESET}")
    return EXIT_OK


COMMANDS = {
    "check": cmd_check,
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "experiment": cmd_experiment,
    "table": cmd_table,
}


# ── Entry point ──────────────────────────────────────────────────────────────

class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors raise ConfigError instead of exiting with status 2."""

    def error(self, message):
        raise ConfigError(message, "argv")


def build_parser():
    common = _ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, metavar="PATH",
                        help="JSON config (or an artifact carrying an echoed config)")
    common.add_argument("--seed", default=None, type=int, metavar="U64",
                        help="master seed (experiment.master_seed)")
    common.add_argument("--n", default=None, type=int, metavar="INT",
                        help="observations per unit time (scheme.n)")
    common.add_argument("--alpha", default=None, type=float, metavar="FLOAT",
                        help="horizon exponent, T = n^alpha (scheme.alpha)")
    common.add_argument("--substeps", default=None, type=int, metavar="INT",
                        help="simulation steps per observation interval")
    common.add_argument("--replicates", default=None, type=int, metavar="INT")
    common.add_argument("--method", default=None, choices=["euler", "milstein"])
    common.add_argument("--out", default=None, metavar="DIR", help="output directory")
    common.add_argument("--case", default=None, choices=["1", "2", "3"],
                        help="use the model of a benchmark case (see CASES.md)")
    common.add_argument("--probe-radius", default=None, type=float, dest="probe_radius",
                        metavar="FLOAT", help="assumption probe grid radius (default: 50)")
    common.add_argument("--force", action="store_true",
                        help="run even when the assumption checks fail")
    common.add_argument("--threads", default=1, type=int, metavar="INT")
    common.add_argument("--json-errors", action="store_true", dest="json_errors",
                        help="print errors as one JSON object on stderr")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = _ArgumentParser(
        prog="driftmle",
        description="Drift-parameter MLE for ergodic diffusions observed at high frequency",
    )
    ap.add_argument("--version", action="version", version=f"driftmle {VERSION}")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("check", parents=[common],
                       help="numeric assumption checks and invariant-law summary")
    p.add_argument("--json", action="store_true", dest="json_output", help="output as JSON")
    sub.add_parser("simulate", parents=[common], help="simulate one observed path")
    p = sub.add_parser("estimate", parents=[common],
                       help="estimate theta from a stored or fresh path")
    p.add_argument("--path", default=None, metavar="FILE", help="path file (.csv or .npz)")
    p.add_argument("--json", action="store_true", dest="json_output", help="output as JSON")
    sub.add_parser("experiment", parents=[common],
                   help="Monte Carlo over experiment.ns x experiment.alphas")
    p = sub.add_parser("table", parents=[common],
                       help="reproduce the benchmark tables beside the published values")
    p.add_argument("--cell", default=None, metavar="n=INT,alpha=FLOAT")
    p.add_argument("--quick", action="store_true",
                   help="only n=1000, alpha in {0.5, 0.9} instead of all 6 x 3 cells")
    return ap


def _report(exc, command, json_errors, working_dir):
    """Log a DriftMLEError to errors.log and stderr; returns its exit code."""
    record = exc.to_record()
    if working_dir is None and _file_handler is not None:
        working_dir = pathlib.Path(_file_handler.baseFilename).parent
    if working_dir is not None:
        _log_error(command, record["error_type"], record["error_msg"],
                   details=json.dumps(record, default=str), working_dir=working_dir)
    if json_errors:
        print(json.dumps(dict(record, exit_code=exc.exit_code), default=str), file=sys.stderr)
    else:
        print(f"{C.RED}error:{C.RESET} {exc}", file=sys.stderr)
    return exc.exit_code


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        return _report(exc, "argv", "--json-errors" in argv, None)
    if args.verbose:
        _stderr_handler.setLevel(logging.DEBUG)
    working_dir = None
    try:
        cfg = load_config(args.config, _flag_overrides(args))
        out = pathlib.Path(cfg["io"]["out_dir"])
        working_dir = out if out.exists() else None
        return COMMANDS[args.command](cfg, args)
    except DriftMLEError as exc:
        return _report(exc, args.command, args.json_errors, working_dir)
    except Exception as exc:
        _logger.exception("unexpected failure in %s", args.command)
        _log_error(args.command, type(exc).__name__, str(exc), working_dir=working_dir)
        return 3
    finally:
        _detach_file_log()
        _stderr_handler.setLevel(logging.WARNING)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: ``netdr analyze`` and ``netdr simulate``.

Both commands read an optional JSON config; command-line flags override
its values. Every CSV written starts with a ``# config:`` line holding the
fully resolved configuration (including the seed), and numbers are printed
with 17 significant digits so identical runs give identical bytes.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import re
import sys
from pathlib import Path

import numpy as np

from .design import DesignError
from .estimators import KINDS, EstimationError, NetworkContext, effects, estimate_means, fit_arm_models, arm_keys
from .graph import GraphError, NodeData, load_graph
from .mestimation import EstimatingStack, SandwichError, contrast_se, stack_targets
from .outcome import OutcomeDesign, OutcomeError, fit_lmm, fit_ols
from .propensity import PropensityError, fit_propensity
from .simulate import (SCENARIOS, SUMMARY_FIELDS, DgpConfig, replicate_truths, resolve_scenarios,
                       run_scenarios)

log = logging.getLogger("netdr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

ESTIMATE_FIELDS = ("estimator", "estimand", "alpha", "alpha_prime", "point", "se", "ci_lo", "ci_hi",
                   "diagnostics")
RECORD_FIELDS = ("replicate", "scenario", "estimator", "estimand", "point", "se", "truth", "status")
TRUTH_FIELDS = ("replicate", "estimand", "alpha", "alpha_prime", "value")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# -- CSV I/O ----------------------------------------------------------------------

def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_table(path, fields, rows, config: dict):
    """Write a CSV whose first line embeds ``config`` as JSON."""
    buf = io.StringIO()
    buf.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for row in rows:
        w.writerow([fmt(row.get(f)) for f in fields])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


_INT_FIELDS = {"replicate", "n_used", "n_excluded"}
_FLOAT_FIELDS = {"alpha", "alpha_prime", "point", "se", "ci_lo", "ci_hi", "truth", "bias", "mse",
                 "ese", "ase", "coverage", "value"}


def _parse(field, text):
    if field in _INT_FIELDS:
        return int(text)
    if field in _FLOAT_FIELDS:
        return None if text == "" else float(text)
    return text


def read_table(path):
    """Inverse of :func:`write_table`: ``(config, rows)``."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("# config: "):
            raise DataError(f"{path}: missing config line")
        config = json.loads(first[len("# config: "):])
        rows = [{k: _parse(k, v) for k, v in r.items()} for r in csv.DictReader(fh)]
    return config, rows


def rows_equal(a, b) -> bool:
    """Row-list equality that treats NaN as equal to NaN."""
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        if x.keys() != y.keys():
            return False
        for k in x:
            u, v = x[k], y[k]
            if isinstance(u, float) and isinstance(v, float) and math.isnan(u) and math.isnan(v):
                continue
            if u != v:
                return False
    return True


def pretty_table(fields, rows) -> str:
    cells = [[fmt_short(r.get(f)) for f in fields] for r in rows]
    widths = [max([len(f)] + [len(c[i]) for c in cells]) for i, f in enumerate(fields)]
    line = "  ".join(f.ljust(w) for f, w in zip(fields, widths))
    out = [line, "-" * len(line)]
    out += ["  ".join(c.ljust(w) for c, w in zip(cs, widths)) for cs in cells]
    return "\n".join(out) + "\n"


def fmt_short(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{v:.3f}"
    return fmt(v)


# -- input files ------------------------------------------------------------------

def read_nodes(path):
    """Node CSV: ``Z``, ``Y`` then covariates; an optional ``id`` column names nodes.

    Returns ``(NodeData, ids)`` with ``ids`` the string id of each row.
    """
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            raw = [r for r in reader if r]
    except (OSError, StopIteration) as exc:
        raise DataError(f"cannot read node file {path}: {exc}") from exc
    for need in ("Z", "Y"):
        if need not in header:
            raise DataError(f"node file lacks a {need!r} column")
    id_col = header.index("id") if "id" in header else None
    cov = [i for i, h in enumerate(header) if h not in ("Z", "Y", "id")]
    ids, Z, Y, X = [], [], [], []
    for k, r in enumerate(raw):
        if len(r) != len(header):
            raise DataError(f"node file row {k + 2} has {len(r)} fields, expected {len(header)}")
        try:
            Z.append(float(r[header.index("Z")]))
            Y.append(float(r[header.index("Y")]))
            X.append([float(r[i]) for i in cov])
        except ValueError as exc:
            raise DataError(f"node file row {k + 2}: {exc}") from exc
        ids.append(r[id_col].strip() if id_col is not None else str(k))
    if len(set(ids)) != len(ids):
        raise DataError("node ids are not unique")
    Z = np.asarray(Z)
    if not np.all((Z == 0) | (Z == 1)):
        raise DataError("Z must be 0 or 1")
    Xa = np.asarray(X, dtype=float).reshape(len(raw), len(cov))
    data = NodeData(Xa, Z.astype(np.int64), np.asarray(Y), tuple(header[i] for i in cov))
    return data, ids


def read_edges(path, ids, header: bool):
    """Edge list with one ``src,dst`` pair per line, mapped through the node ids."""
    index = {s: k for k, s in enumerate(ids)}
    edges = []
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read edge file {path}: {exc}") from exc
    if header and rows:
        rows = rows[1:]
    for k, r in enumerate(rows):
        if not r or all(not c.strip() for c in r):
            continue
        if len(r) != 2:
            raise DataError(f"edge file line {k + 1 + header}: expected 'src,dst'")
        a, b = r[0].strip(), r[1].strip()
        for v in (a, b):
            if v not in index:
                raise DataError(f"edge file line {k + 1 + header}: unknown node id {v!r}")
        edges.append((index[a], index[b]))
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2)


# -- config -------------------------------------------------------------------------

ANALYZE_DEFAULTS = dict(
    edges=None, nodes=None, header=False, treatment=None, outcome=None, exposure="proportion",
    interaction=True, outcome_variant="fixed", estimators=list(KINDS),
    alphas=[0.2, 0.4, 0.6, 0.8], alpha_prime=0.4, level=0.95, drop_isolates=False, Q=10,
    seed=0, pooling="component", small_sample=False, out="netdr-out",
)

SIMULATE_DEFAULTS = dict(
    scheme="balanced", m=None, component_size=30, interference="first", scenarios=["a"],
    S=200, seed=1, estimators=list(KINDS), estimands=["DE(0.6)"], multilevel=None, se=True,
    Q=10, threads=None, out="netdr-sim", dump_truth=False, dgp={},
)

_ESTIMAND = re.compile(r"^\s*(DE|IE|TE|OE)\s*\(\s*([0-9.eE+-]+)\s*(?:,\s*([0-9.eE+-]+)\s*)?\)\s*$")


def parse_estimand(text):
    if isinstance(text, (list, tuple)):
        kind, a, ap = (list(text) + [None])[:3]
        return kind, float(a), None if ap is None else float(ap)
    m = _ESTIMAND.match(str(text))
    if not m:
        raise ConfigError(f"cannot parse estimand {text!r}; use e.g. DE(0.6) or IE(0.8,0.2)")
    kind, a, ap = m.group(1), float(m.group(2)), m.group(3)
    ap = None if ap is None else float(ap)
    if (kind == "DE") != (ap is None):
        raise ConfigError(f"{text!r}: DE takes one allocation, IE/TE/OE take two")
    return kind, a, ap


def load_config(path, defaults: dict) -> dict:
    cfg = dict(defaults)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(user) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(user)
    return cfg


def _override(cfg, args, keys):
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v


def _check_alpha(a, what):
    if not (isinstance(a, (int, float)) and 0 <= a <= 1):
        raise ConfigError(f"{what} must lie in [0, 1], got {a!r}")


def validate_analyze(cfg):
    for k in ("edges", "nodes", "treatment", "outcome"):
        if not cfg[k]:
            raise ConfigError(f"analyze needs {k!r}")
    if not cfg["estimators"] or any(e not in KINDS for e in cfg["estimators"]):
        raise ConfigError(f"estimators must be a non-empty subset of {', '.join(KINDS)}")
    if cfg["outcome_variant"] not in ("fixed", "multilevel"):
        raise ConfigError("outcome_variant must be 'fixed' or 'multilevel'")
    if not cfg["alphas"]:
        raise ConfigError("alphas must not be empty")
    for a in cfg["alphas"]:
        _check_alpha(a, "alpha")
    _check_alpha(cfg["alpha_prime"], "alpha_prime")
    if not 0 < cfg["level"] < 1:
        raise ConfigError("level must lie in (0, 1)")
    if cfg["pooling"] not in ("component", "global"):
        raise ConfigError("pooling must be 'component' or 'global'")
    if int(cfg["Q"]) < 1:
        raise ConfigError("Q must be positive")


# -- analyze ---------------------------------------------------------------------------

def analyze(cfg: dict):
    """Fit the requested estimators and return ``(rows, n_dropped)``."""
    validate_analyze(cfg)
    data, ids = read_nodes(cfg["nodes"])
    edges = read_edges(cfg["edges"], ids, cfg["header"])
    g = load_graph(edges, data.n)
    n_dropped = 0
    if cfg["drop_isolates"]:
        keep = g.degree > 0
        n_dropped = int((~keep).sum())
        g, old = g.subgraph_nodes(keep)
        data = data.subset(old)
        ids = [ids[k] for k in old]
    alphas = [float(a) for a in cfg["alphas"]]
    ap = float(cfg["alpha_prime"])
    estimands = []
    for a in alphas:
        estimands += [("DE", a, None), ("IE", a, ap), ("TE", a, ap), ("OE", a, ap)]
    targets = stack_targets(estimands)
    multilevel = cfg["outcome_variant"] == "multilevel"
    design = OutcomeDesign(tuple(cfg["outcome"]), cfg["exposure"], bool(cfg["interaction"]))
    kinds = [k for k in KINDS if k in cfg["estimators"]]
    ctx = NetworkContext(g, data, tuple(cfg["treatment"]), design, None, int(cfg["Q"]),
                         pooling=cfg["pooling"])
    fit_p = None
    if any(k in ("IPW", "DRBC", "IPWLS") for k in kinds):
        fit_p = fit_propensity(g, data, tuple(cfg["treatment"]), int(cfg["Q"]))
        if not fit_p.converged:
            raise PropensityError(f"treatment model did not converge: {fit_p.message}")
    fit_o = None
    if any(k in ("REG", "DRBC") for k in kinds):
        fit_o = (fit_lmm if multilevel else fit_ols)(g, data, design)
        if not fit_o.converged:
            raise OutcomeError("outcome model did not converge")
    rows = []
    for kind in kinds:
        arm_fits = fit_arm_models(ctx, fit_p, arm_keys(targets), multilevel) if kind == "IPWLS" else None
        means = estimate_means(ctx, kind, targets, fit_p, fit_o, arm_fits)
        stack = EstimatingStack(ctx, kind, targets, fit_p, fit_o, arm_fits, means.mu)
        res = stack.sandwich(bool(cfg["small_sample"]))
        diag = [f"m={g.n_components}", f"cond_U={res.cond:.3g}"]
        if fit_p is not None and kind != "REG":
            diag.append(f"n_floored={means.info.get('n_floored', 0)}")
            if fit_p.boundary:
                diag.append("phi_b_on_boundary")
        if fit_o is not None and kind in ("REG", "DRBC") and fit_o.boundary:
            diag.append("sigma2_c_on_boundary")
        if kind == "IPWLS" and multilevel:
            diag.append("no_DR_guarantee")
        if cfg["pooling"] == "global":
            diag.append("non_canonical_pooling")
        if n_dropped:
            diag.append(f"isolates_dropped={n_dropped}")
        for a in alphas:
            for eff in effects(means, a, ap):
                se, (lo, hi) = contrast_se(res, stack.tau(eff.kind, eff.alpha, eff.alpha_prime),
                                           level=float(cfg["level"]))
                rows.append(dict(estimator=kind, estimand=eff.label, alpha=eff.alpha,
                                 alpha_prime=eff.alpha_prime, point=eff.point, se=se,
                                 ci_lo=lo, ci_hi=hi, diagnostics=";".join(diag)))
    return rows, ids


def cmd_analyze(args) -> int:
    cfg = load_config(args.config, ANALYZE_DEFAULTS)
    _override(cfg, args, ["edges", "nodes", "outcome_variant", "alpha_prime", "level", "Q", "seed",
                          "pooling", "out"])
    for k in ("header", "drop_isolates", "small_sample"):
        if getattr(args, k):
            cfg[k] = True
    for k in ("treatment", "outcome", "estimators"):
        v = getattr(args, k)
        if v is not None:
            cfg[k] = [t.strip() for t in v.split(",") if t.strip()]
    if args.alphas is not None:
        cfg["alphas"] = [float(t) for t in args.alphas.split(",")]
    rows, ids = analyze(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo = {k: v for k, v in cfg.items() if k != "out"}
    write_table(out / "estimates.csv", ESTIMATE_FIELDS, rows, echo)
    (out / "estimates.txt").write_text(pretty_table(ESTIMATE_FIELDS[:-1], rows), encoding="utf-8")
    write_table(out / "node_ids.csv", ("index", "id"),
                [dict(index=k, id=s) for k, s in enumerate(ids)], echo)
    sys.stdout.write(pretty_table(ESTIMATE_FIELDS[:-1], rows))
    if any("no_DR_guarantee" in r["diagnostics"] for r in rows):
        log.warning("IPWLS with a multilevel outcome model carries no double-robustness guarantee")
    return EXIT_OK


# -- simulate --------------------------------------------------------------------------

def resolve_simulate(cfg: dict):
    dgp = dict(cfg.get("dgp") or {})
    dgp.setdefault("scheme", cfg["scheme"])
    dgp.setdefault("interference", cfg["interference"])
    dgp.setdefault("component_size", cfg["component_size"])
    dgp["seed"] = int(cfg["seed"])
    if cfg["m"] is not None:
        dgp["m"] = int(cfg["m"])
    elif "m" not in dgp:
        dgp["m"] = 100 if dgp["scheme"] == "multilevel" else 30
    try:
        dcfg = DgpConfig(**dgp)
    except TypeError as exc:
        raise ConfigError(f"bad dgp settings: {exc}") from exc
    scenarios = list(cfg["scenarios"])
    resolve_scenarios(scenarios, dcfg)
    estimands = [parse_estimand(e) for e in cfg["estimands"]]
    for _, a, ap in estimands:
        _check_alpha(a, "alpha")
        if ap is not None:
            _check_alpha(ap, "alpha_prime")
    if int(cfg["S"]) < 2:
        raise ConfigError("S must be at least 2")
    if not cfg["estimators"] or any(e not in KINDS for e in cfg["estimators"]):
        raise ConfigError(f"estimators must be a non-empty subset of {', '.join(KINDS)}")
    return dcfg, scenarios, estimands


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, SIMULATE_DEFAULTS)
    _override(cfg, args, ["scheme", "m", "S", "seed", "threads", "out", "Q", "interference"])
    if args.scenario:
        cfg["scenarios"] = [s.strip() for v in args.scenario for s in v.split(",") if s.strip()]
    if args.estimand:
        cfg["estimands"] = list(args.estimand)
    if args.estimators is not None:
        cfg["estimators"] = [t.strip() for t in args.estimators.split(",") if t.strip()]
    if args.no_se:
        cfg["se"] = False
    if args.dump_truth:
        cfg["dump_truth"] = True
    dcfg, scenarios, estimands = resolve_simulate(cfg)
    cfg["dgp"] = dcfg.to_dict()
    threads = cfg["threads"]
    report = run_scenarios(dcfg, scenarios, int(cfg["S"]), tuple(cfg["estimators"]), estimands,
                           cfg["multilevel"], bool(cfg["se"]), threads, int(cfg["Q"]))
    # thread count and output path cannot change results; keep them out of the echo
    echo = {k: v for k, v in cfg.items() if k not in ("threads", "out")}
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "summary.csv", SUMMARY_FIELDS, report.summary, echo)
    write_table(out / "replicates.csv", RECORD_FIELDS, report.records, echo)
    table = pretty_table(SUMMARY_FIELDS, report.summary)
    (out / "summary.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    if cfg["dump_truth"]:
        write_table(out / "truth.csv", TRUTH_FIELDS,
                    truth_rows(dcfg, int(cfg["S"]), estimands), echo)
    excluded = [r for r in report.records if r["status"] != "ok"]
    if excluded:
        causes = {}
        for r in excluded:
            causes[r["status"]] = causes.get(r["status"], 0) + 1
        for c, n in sorted(causes.items()):
            log.warning("excluded %d record(s): %s", n, c)
    return EXIT_OK


def truth_rows(dcfg: DgpConfig, S: int, estimands) -> list[dict]:
    """Per-replicate truths; every (alpha, alpha') pair gets DE, IE, TE and OE."""
    full = []
    for kind, a, ap in estimands:
        block = [("DE", a, None)] if ap is None else [("DE", a, None), ("IE", a, ap),
                                                       ("TE", a, ap), ("OE", a, ap)]
        full += [e for e in block if e not in full]
    rows = []
    for r, table in enumerate(replicate_truths(dcfg, S, full)):
        for kind, a, ap in full:
            label = f"{kind}({a:g})" if ap is None else f"{kind}({a:g},{ap:g})"
            rows.append(dict(replicate=r, estimand=label, alpha=a, alpha_prime=ap,
                             value=table.value(kind, a, ap)))
    return rows


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="netdr", description="Causal effects under network interference.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="estimate effects on a network dataset")
    a.add_argument("--config")
    a.add_argument("--edges")
    a.add_argument("--nodes")
    a.add_argument("--header", action="store_true", help="edge file has a header line")
    a.add_argument("--treatment", help="comma-separated treatment model terms, e.g. 'x1,abs(x2),x1:x3'")
    a.add_argument("--outcome", help="comma-separated outcome covariate terms")
    a.add_argument("--outcome-variant", dest="outcome_variant", choices=("fixed", "multilevel"))
    a.add_argument("--estimators", help=f"comma-separated subset of {','.join(KINDS)}")
    a.add_argument("--alphas", help="comma-separated allocation grid")
    a.add_argument("--alpha-prime", dest="alpha_prime", type=float)
    a.add_argument("--level", type=float)
    a.add_argument("--drop-isolates", dest="drop_isolates", action="store_true")
    a.add_argument("--small-sample", dest="small_sample", action="store_true",
                   help="inflate the sandwich by m/(m-p)")
    a.add_argument("--pooling", choices=("component", "global"))
    a.add_argument("--Q", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="run a simulation study")
    s.add_argument("--config")
    s.add_argument("--scheme", choices=("balanced", "multilevel"))
    s.add_argument("--interference", choices=("first", "phi_tilde", "second_order"))
    s.add_argument("--scenario", action="append",
                   help=f"scenario name(s), repeatable or comma-separated: {','.join(SCENARIOS)}")
    s.add_argument("--estimand", action="append", help="e.g. DE(0.6) or IE(0.8,0.2); repeatable")
    s.add_argument("--estimators")
    s.add_argument("--m", type=int)
    s.add_argument("--S", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--Q", type=int)
    s.add_argument("--threads", type=int, help="worker processes (default: all cores)")
    s.add_argument("--no-se", dest="no_se", action="store_true")
    s.add_argument("--dump-truth", dest="dump_truth", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="netdr: %(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (GraphError, DesignError, DataError) as exc:
        _report("data", exc)
        return EXIT_DATA
    except (PropensityError, OutcomeError, EstimationError, SandwichError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        _report("numerical", exc)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError) as exc:
        _report("config", exc)
        return EXIT_CONFIG


def _report(kind, exc):
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")


if __name__ == "__main__":
    sys.exit(main())

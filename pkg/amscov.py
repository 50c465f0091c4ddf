#!/usr/bin/env python3
"""
amscov - coverage-driven verification runs for analog/mixed-signal models.

Subcommands:
    cover         evaluate a coverpoint spec on a trace (file or simulated)
    bode-explore  drive a model at its Bode-gain extremum and compare ranges
    bayes-opt     close a coverage gap / chase an illegal bin with Bayesian optimization
    report        print the coverage gap and bug hits accumulated in the database

Exit codes: 0 success, 1 usage or parse error, 2 runtime failure, 3 illegal bin hit.
"""

import argparse
import json
import logging
import os
import sys

from core.bayes_opt import (
    BUG_BIN, GAP_LOWER, GAP_UPPER, OBJECTIVE_KINDS, BayesOptError, BoSettings, CoverageObjective,
    ParameterSpace, default_n_init, history_rows, random_search, run_optimization,
)
from core.bins import BinError, BinSet, parse_bin
from core.circuit_sim import LtiModel, SimulationError, parse_stimulus
from core.config_manager import DEFAULT_SETTINGS_FILE, ConfigManager
from core.coverage_engine import ArtifactError, evaluate
from core.coverage_space import (
    CorruptDatabase, CoverageDatabase, CoverageSpaceError, DatabaseIOError,
    format_gap_report, format_records, gap_report_records,
)
from core.coverpoint_spec import CoverpointSpecError, load_coverpoint_spec
from core.freq_explorer import PEAK, TROUGH, explore, exploration_rows, format_exploration
from core.model_library import ModelConfigError, load_model, make_simulator, simulate
from core.trace import TraceError, load_trace, write_trace
from utils.export_manager import ExportError, ResultsExporter, safe_filename

logger = logging.getLogger("amscov")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_BUG = 3

PARSE_ERRORS = (TraceError, CoverpointSpecError, ModelConfigError, BinError, CorruptDatabase, DatabaseIOError)
RUNTIME_ERRORS = (ArtifactError, SimulationError, BayesOptError, CoverageSpaceError, ExportError, ValueError, OSError)


class UsageError(Exception):
    """Bad or missing command-line arguments."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="amscov", description="Coverage-driven verification for analog/mixed-signal models")
    parser.add_argument("--config", help="Run-config JSON (keys mirror the command-line flags)")
    parser.add_argument("--settings", default=None, help=f"Settings JSON (default: {DEFAULT_SETTINGS_FILE})")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logging")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--db", help="Coverage database file")
    parser.add_argument("--seed", type=int, help="Seed for every stochastic step")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("cover", help="Evaluate coverpoints on one trace and accumulate")
    p.add_argument("--spec", help="Coverpoint specification JSON")
    p.add_argument("--trace", help="Trace CSV to evaluate")
    p.add_argument("--model", help="Model name or config path to simulate instead of --trace")
    p.add_argument("--stimulus", help="LTI input, e.g. sine:amplitude=1,frequency=728")
    p.add_argument("--input", type=float, help="Static-model input value")
    p.add_argument("--dt", type=float, help="Simulation step (s)")
    p.add_argument("--duration", type=float, help="Simulation length (s)")
    p.add_argument("--test-id", dest="test_id", help="Test id recorded in the database")

    p = sub.add_parser("bode-explore", help="Drive an LTI model at its gain peak (or trough)")
    p.add_argument("--model", help="LTI model name or config path")
    p.add_argument("--amplitude", type=float, help="Sine amplitude")
    p.add_argument("--compare", type=float, nargs="*", help="Comparison frequencies (Hz)")
    p.add_argument("--dt", type=float, help="Simulation step (s); automatic when omitted")
    p.add_argument("--duration", type=float, help="Simulation length (s); automatic when omitted")
    p.add_argument("--points-per-decade", dest="points_per_decade", type=int, help="Bode grid density")
    p.add_argument("--f-lo", dest="f_lo", type=float, help="Lowest Bode frequency (Hz)")
    p.add_argument("--f-hi", dest="f_hi", type=float, help="Highest Bode frequency (Hz)")
    p.add_argument("--target", choices=(PEAK, TROUGH), help="Drive the gain peak or trough")

    p = sub.add_parser("bayes-opt", help="Bayesian optimization over a static model's input")
    p.add_argument("--model", help="Static model name or config path")
    p.add_argument("--spec", help="Coverpoint specification JSON")
    p.add_argument("--coverpoint", help="Coverpoint id (default: first in spec)")
    p.add_argument("--objective", choices=OBJECTIVE_KINDS, help="Objective kind")
    p.add_argument("--bound", type=float, help="Gap target a (gap_lower) or b (gap_upper)")
    p.add_argument("--bin", help="Illegal bin [c:d] for bug_bin (default: coverpoint's first illegal bin)")
    p.add_argument("--budget", type=int, help="Total evaluations")
    p.add_argument("--n-init", dest="n_init", type=int, help="Initial Latin-hypercube points")
    p.add_argument("--baseline", choices=("bo", "random"), help="Optimizer (random = uniform baseline)")
    p.add_argument("--dt", type=float, help="Simulation step (s)")
    p.add_argument("--duration", type=float, help="Simulation length (s)")

    p = sub.add_parser("report", help="Print coverage gap and bug hits")
    p.add_argument("--spec", help="Coverpoint specification JSON")

    return parser


def _configure_logging(verbosity, settings):
    level = settings.get_log_level()
    if verbosity == 1:
        level = min(level, logging.INFO)
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def _apply_run_config(args, settings):
    """Fill unset flags (and settings keys) from the --config JSON."""
    try:
        with open(args.config, "r", encoding="utf-8") as f:
            run_config = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"Cannot read run config {args.config}: {e}") from None
    if not isinstance(run_config, dict):
        raise UsageError("Run config must be a JSON object")
    strategy = run_config.pop("strategy", None)
    if strategy is not None and strategy != args.command:
        raise UsageError(f"Run config is for '{strategy}', not '{args.command}'")
    known_settings = settings._get_defaults()
    for key, value in run_config.items():
        dest = key.replace("-", "_")
        if hasattr(args, dest):
            if getattr(args, dest) in (None, []):
                setattr(args, dest, value)
        elif key in known_settings:
            settings.set(key, value)
        else:
            raise UsageError(f"Unknown run-config key '{key}'")


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise UsageError(f"{args.command} needs {', '.join(missing)}")


def _out_dir(args, settings):
    path = args.out or settings.resolve(settings.get_output_dir())
    os.makedirs(path, exist_ok=True)
    return path


def _db_path(args, settings):
    return args.db or settings.resolve(settings.get_database_path())


def _seed(args, settings):
    return args.seed if args.seed is not None else settings.get_seed()


# ---------------------------------------------------------------------------
# cover
# ---------------------------------------------------------------------------

def _format_cover_report(test_id, spec, results, added, bugs):
    lines = [f"test {test_id}  spec {spec.name}", ""]
    for r in results:
        lines.append(f"{r.coverpoint_id}:")
        lines.append(f"  output:     {' '.join(str(b) for b in r.output) or '-'}")
        lines.append(f"  cells hit:  {len(r.cells)}   new: {' '.join(added.get(r.coverpoint_id, BinSet()).to_strings()) or '-'}")
        if r.untargeted:
            lines.append(f"  untargeted: {' '.join(r.untargeted.to_strings())}")
        if r.note:
            lines.append(f"  note:       {r.note}")
        if r.coverpoint_id in bugs:
            lines.append(f"  BUG: illegal bin(s) hit {' '.join(bugs[r.coverpoint_id].to_strings())}")
    return "\n".join(lines) + "\n"


def cmd_cover(args, settings):
    _require(args, "spec")
    spec = load_coverpoint_spec(args.spec)
    exporter = ResultsExporter()
    out = _out_dir(args, settings)
    simulated = False
    if args.trace:
        trace = load_trace(args.trace)
        inputs = {"trace": args.trace}
    elif args.model:
        config = load_model(args.model)
        if config.is_static:
            _require(args, "input")
            trace = simulate(config, x=args.input, dt=args.dt, duration=args.duration)
            inputs = {"model": config.name, "input": args.input}
        else:
            _require(args, "stimulus")
            trace = simulate(config, stimulus=parse_stimulus(args.stimulus), dt=args.dt, duration=args.duration)
            inputs = {"model": config.name, "stimulus": args.stimulus}
        simulated = True
    else:
        raise UsageError("cover needs --trace or --model")

    halve = bool(settings.get("halve_crossings", False))
    results = [evaluate(cp, trace, spec.targets[cp.id].grid, halve) for cp in spec.coverpoints]

    db_path = _db_path(args, settings)
    db = CoverageDatabase.open(db_path, spec.ids)
    test_id = args.test_id or f"test-{len(db.test_log) + 1}"
    added = db.accumulate(test_id, results, inputs)
    db.persist(db_path)

    bugs = {}
    for r in results:
        hit = r.covered.intersect(spec.targets[r.coverpoint_id].illegal)
        if hit:
            bugs[r.coverpoint_id] = hit
    text = _format_cover_report(test_id, spec, results, added, bugs)
    exporter.export_text(text, os.path.join(out, "cover_report.txt"))
    if simulated:
        write_trace(trace, os.path.join(out, "trace.csv"))
    print(text, end="")
    return EXIT_BUG if bugs else EXIT_OK


# ---------------------------------------------------------------------------
# bode-explore
# ---------------------------------------------------------------------------

def cmd_bode_explore(args, settings):
    _require(args, "model")
    config = load_model(args.model)
    if not isinstance(config.model, LtiModel):
        raise UsageError(f"bode-explore needs an LTI model; '{config.name}' is a static map")
    report = explore(
        config.model,
        amplitude=args.amplitude if args.amplitude is not None else float(settings.get("explore_amplitude", 1.0)),
        comparison_freqs=args.compare or (),
        dt=args.dt,
        duration=args.duration,
        f_lo=args.f_lo if args.f_lo is not None else float(settings.get("bode_f_lo", 1.0)),
        f_hi=args.f_hi if args.f_hi is not None else float(settings.get("bode_f_hi", 1e6)),
        points_per_decade=args.points_per_decade or int(settings.get("points_per_decade", 100)),
        target=args.target or PEAK,
        settle_constants=float(settings.get("explore_settle_constants", 10.0)),
        max_workers=settings.get_max_workers(),
    )
    out = _out_dir(args, settings)
    exporter = ResultsExporter()
    exporter.export_to_csv(report.bode.rows(), os.path.join(out, "bode.csv"),
                           fieldnames=["frequency_hz", "gain_db", "phase_deg"])
    exporter.export_to_csv(exploration_rows(report), os.path.join(out, "exploration.csv"),
                           metadata={"model": config.name, "target": report.target, "amplitude": report.amplitude})
    for i, run in enumerate(report.runs, start=1):
        write_trace(run.trace, os.path.join(out, safe_filename(f"trace_{i}_{run.frequency:.6g}Hz.csv")))
    print(format_exploration(report), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bayes-opt
# ---------------------------------------------------------------------------

def cmd_bayes_opt(args, settings):
    _require(args, "model", "spec", "objective")
    config = load_model(args.model)
    if not config.is_static:
        raise UsageError(f"bayes-opt needs a static-map model; '{config.name}' is LTI")
    spec = load_coverpoint_spec(args.spec)
    cp_id = args.coverpoint or spec.ids[0]
    try:
        cp = spec.get(cp_id)
    except KeyError:
        raise UsageError(f"Coverpoint '{cp_id}' is not in {args.spec}") from None
    target = spec.targets[cp_id]

    illegal = None
    if args.objective == BUG_BIN:
        if args.bin:
            illegal = parse_bin(args.bin)
        elif target.illegal:
            illegal = target.illegal.bins[0]
        else:
            raise UsageError(f"bug_bin needs --bin; coverpoint '{cp_id}' declares no illegal bins")
    elif args.bound is None:
        raise UsageError(f"{args.objective} needs --bound")

    space = ParameterSpace.from_bin(config.model.domain, name="x")
    budget = args.budget if args.budget is not None else int(settings.get("bo_budget", 20))
    n_init = args.n_init if args.n_init is not None else settings.get("bo_n_init")
    n_init = default_n_init(space) if n_init is None else int(n_init)
    baseline = args.baseline or "bo"
    if baseline == "bo" and budget <= n_init:
        raise UsageError(f"budget ({budget}) must exceed n_init ({n_init})")
    if budget < 1:
        raise UsageError("budget must be >= 1")

    objective = CoverageObjective(
        kind=args.objective,
        coverpoint=cp,
        simulator=make_simulator(config, args.dt, args.duration),
        bound=args.bound if args.objective in (GAP_LOWER, GAP_UPPER) else None,
        illegal=illegal,
    )
    seed = _seed(args, settings)
    db_path = _db_path(args, settings)
    db = CoverageDatabase.open(db_path, spec.ids)
    if baseline == "random":
        history = random_search(objective, space, budget, seed, db=db, grid=target.grid)
    else:
        bo = BoSettings(**settings.get_bo_settings())
        history = run_optimization(objective, space, budget, n_init, seed, bo, db=db, grid=target.grid)
    db.persist(db_path)

    out = _out_dir(args, settings)
    exporter = ResultsExporter()
    exporter.export_to_csv(history_rows(history), os.path.join(out, "history.csv"),
                           metadata={"model": config.name, "coverpoint": cp_id,
                                     "objective": args.objective, "seed": seed})
    summary = history.summary()
    summary.update({
        "model": config.name,
        "coverpoint": cp_id,
        "baseline": baseline,
        "bound": args.bound,
        "illegal_bin": None if illegal is None else str(illegal),
        "effective_settings": dict(settings.config),
    })
    exporter.export_json(summary, os.path.join(out, "summary.json"))

    best = history.best
    print(f"{baseline} {args.objective} on {config.name}/{cp_id}: {len(history)} evaluations")
    print(f"  best x = {best.x[0]!r}   y_C = {best.y_c!r}   objective = {best.value!r}")
    if history.bug_found:
        print(f"  BUG: illegal bin {illegal} hit at evaluation {history.evaluations_to_bug()}")
        return EXIT_BUG
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args, settings):
    _require(args, "spec")
    spec = load_coverpoint_spec(args.spec)
    db_path = _db_path(args, settings)
    db = CoverageDatabase.open(db_path, spec.ids)
    report = db.gap_report(spec.targets)
    text = format_gap_report(report)
    out = _out_dir(args, settings)
    exporter = ResultsExporter()
    exporter.export_text(text, os.path.join(out, "gap_report.txt"))
    exporter.export_text(format_records(gap_report_records(report)), os.path.join(out, "gap_report.kv"))
    print(text, end="")
    return EXIT_BUG if report.has_bugs else EXIT_OK


COMMANDS = {
    "cover": cmd_cover,
    "bode-explore": cmd_bode_explore,
    "bayes-opt": cmd_bayes_opt,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required (cover, bode-explore, bayes-opt, report)")
        settings = ConfigManager(args.settings or DEFAULT_SETTINGS_FILE)
        if args.config:
            _apply_run_config(args, settings)
        if args.seed is not None:
            settings.set("seed", args.seed)
        _configure_logging(args.verbose, settings)
        return COMMANDS[args.command](args, settings)
    except UsageError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except PARSE_ERRORS as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as e:
        logger.debug("Run failed", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

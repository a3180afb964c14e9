"""Command line entry point: ``seizfit fit|simulate|generate``.

Every run writes into a fresh output directory together with the fully
resolved configuration. Exit status is 0 on success, 1 on usage or input
errors and 2 when a fit stopped on its iteration budget (outputs are still
written).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .data import (
    DEFAULT_BIN_SECONDS,
    DEFAULT_T0,
    bin_cumulative,
    format_instant,
    generate_synthetic,
    load_binned,
    load_events,
    parse_instant,
    write_binned,
)
from .errors import SeizfitError
from .fitting import FitProblem, OptimizerConfig, multi_start_fit, theta_names
from .integrator import SolverConfig, simulate
from .models import COMPARTMENTS, REFERENCE_SEIZ, CompartmentState, ModelKind, params_as_dict, validate_params
from .report import build_report, digest, emit, write_trajectory_csv

log = logging.getLogger("seizfit")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_WARN = 2

REFERENCE_THETA = {**params_as_dict(REFERENCE_SEIZ), "S0": 27962.0, "E0": 0.0, "I0": 1.0, "Z0": 0.0}


class UsageError(SeizfitError):
    pass


def _json_arg(text):
    """Inline JSON, or the path of a JSON file."""
    if text is None:
        return None
    stripped = text.lstrip()
    if stripped.startswith(("{", "[")):
        return json.loads(text)
    return json.loads(Path(text).read_text(encoding="utf-8"))


def _emit_set(text):
    formats = {f.strip() for f in text.split(",") if f.strip()}
    unknown = formats - {"json", "csv", "svg"}
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown emit formats: {sorted(unknown)}")
    return formats


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"{text} must be >= 1")
    return value


@contextmanager
def run_directory(out):
    """Yield a staging directory that becomes ``out`` only if the run succeeds."""
    out = Path(out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise UsageError(f"output directory {out} exists and is not empty")
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    os.chmod(stage, 0o755)
    if out.exists():
        out.rmdir()
    stage.rename(out)


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _solver(args):
    return SolverConfig(rtol=args.rtol, atol=args.atol)


def _theta_vector(kind, mapping):
    names = theta_names(kind)
    missing = [n for n in names if n not in mapping]
    unknown = [n for n in mapping if n not in names]
    if missing or unknown:
        raise UsageError(f"theta for {kind.value} needs exactly {list(names)}; missing {missing}, unknown {unknown}")
    return np.array([float(mapping[n]) for n in names])


def _split_theta(kind, mapping):
    theta = _theta_vector(kind, mapping)
    k = len(theta) - len(COMPARTMENTS[kind])
    params = validate_params(kind, dict(zip(theta_names(kind)[:k], theta[:k])))
    state = CompartmentState(kind, tuple(theta[k:]))
    return params, state


def _load_observations(args):
    path = Path(args.input)
    raw = path.read_bytes()
    fmt = args.format
    if fmt == "auto":
        first = raw.decode("utf-8-sig").split("\n", 1)[0].strip()
        if first.replace(" ", "") == "bin_index,cumulative_count":
            fmt = "binned"
        elif path.suffix.lower() in (".jsonl", ".ndjson"):
            fmt = "jsonl"
        else:
            fmt = "csv"
    digests = {"input": digest(raw)}
    if fmt == "binned":
        sidecar = Path(args.sidecar) if args.sidecar else path.with_suffix(".json")
        side_raw = sidecar.read_bytes()
        digests["sidecar"] = digest(side_raw)
        return load_binned(raw, side_raw), fmt, digests
    events = load_events(raw, fmt)
    t0 = parse_instant(args.t0) if args.t0 else None
    return bin_cumulative(events, t0=t0, bin_width=args.bin_seconds), fmt, digests


def cmd_fit(args) -> int:
    kind = ModelKind.parse(args.model)
    obs, fmt, digests = _load_observations(args)
    start = args.theta_init
    if isinstance(start, dict):
        start = _theta_vector(kind, start)
    problem = FitProblem.from_observations(
        obs, kind, theta_init=start, bounds=args.bounds, pin=args.pin, solver=_solver(args),
    )
    opt = OptimizerConfig(ftol=args.ftol, xtol=args.xtol, gtol=args.gtol, max_iter=args.max_iter)
    config = {
        "subcommand": "fit",
        "input_format": fmt,
        "model": kind.value,
        "bin_seconds": obs.bin_width,
        "t0": format_instant(obs.t0),
        "n_bins": len(obs),
        "bounds": {n: [lo, hi] for n, lo, hi in zip(problem.names, problem.lower.tolist(), problem.upper.tolist())},
        "pinned": [n for n, f in zip(problem.names, problem.fixed_mask) if f],
        "theta_init": dict(zip(problem.names, problem.theta_init.tolist())),
        "starts": args.starts,
        "seed": args.seed,
        "rtol": args.rtol,
        "atol": args.atol,
        "ftol": args.ftol,
        "xtol": args.xtol,
        "gtol": args.gtol,
        "max_iter": args.max_iter,
        "emit": sorted(args.emit),
        "window": args.window,
    }
    with run_directory(args.out) as stage:
        log.info("fitting %s to %d bins with %d starts", kind.value, len(obs), args.starts)
        fit = multi_start_fit(problem, n_starts=args.starts, seed=args.seed, opt=opt)
        # inputs are identified by content digest so the report does not depend on paths
        meta = {"digests": digests, "config": config, "seed": args.seed, "version": __version__}
        report = build_report(fit, obs, meta)
        if "json" in args.emit:
            emit(report, "json", stage / "report.json")
        if "csv" in args.emit:
            emit(report, "csv", stage / "trajectory.csv")
        if "svg" in args.emit:
            times = np.asarray(report.times)
            plotting.save_fit_svg(stage / "fit.svg", times, report.compartments["I"], report.observed, args.window)
            plotting.save_compartments_svg(
                stage / "compartments.svg", times, report.states(), report.names, args.window
            )
        _write_json(stage / "resolved-config.json", {**config, "input": str(args.input), "out": str(args.out), "version": __version__,
                                                      "digests": digests})
    log.info("rel_error=%.6g status=%s start=%d", fit.rel_error, fit.converged, fit.start_index)
    print(f"rel_error={fit.rel_error:.6g} status={fit.converged} start={fit.start_index}")
    return EXIT_WARN if fit.converged == "budget" else EXIT_OK


def cmd_simulate(args) -> int:
    kind = ModelKind.parse(args.model)
    mapping = args.theta
    if mapping is None:
        if kind is not ModelKind.SEIZ:
            raise UsageError(f"--theta is required for model {kind.value}")
        mapping = REFERENCE_THETA
    params, state = _split_theta(kind, mapping)
    times = np.arange(args.bins, dtype=float)
    traj = simulate(kind, np.array(list(params_as_dict(params).values())), state, times, _solver(args))
    names = COMPARTMENTS[kind]
    config = {
        "subcommand": "simulate",
        "model": kind.value,
        "theta": dict(zip(theta_names(kind), _theta_vector(kind, mapping).tolist())),
        "bins": args.bins,
        "window": args.window,
        "rtol": args.rtol,
        "atol": args.atol,
        "emit": sorted(args.emit),
        "out": str(args.out),
        "version": __version__,
    }
    with run_directory(args.out) as stage:
        if "csv" in args.emit:
            with (stage / "trajectory.csv").open("w", encoding="utf-8", newline="") as fh:
                write_trajectory_csv(fh, traj.times, traj.states, names, window=args.window)
        if "svg" in args.emit:
            plotting.save_compartments_svg(stage / "compartments.svg", traj.times, traj.states, names, args.window)
        _write_json(stage / "resolved-config.json", config)
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.noise is not None and args.noise < 0:
        raise UsageError(f"--noise must be >= 0, got {args.noise}")
    params, state = _split_theta(ModelKind.SEIZ, args.theta or REFERENCE_THETA)
    t0 = parse_instant(args.t0) if args.t0 else DEFAULT_T0
    series = generate_synthetic(
        params, state, args.bins, sigma_rel=args.noise or None, seed=args.seed,
        t0=t0, bin_width=args.bin_seconds, config=_solver(args),
    )
    config = {
        "subcommand": "generate",
        "model": "seiz",
        "theta": {**params_as_dict(params), **{f"{k}0": v for k, v in state.as_dict().items()}},
        "bins": args.bins,
        "noise": args.noise or 0.0,
        "seed": args.seed,
        "bin_seconds": args.bin_seconds,
        "t0": format_instant(t0),
        "rtol": args.rtol,
        "atol": args.atol,
        "out": str(args.out),
        "version": __version__,
    }
    with run_directory(args.out) as stage:
        with (stage / "observations.csv").open("w", encoding="utf-8", newline="") as fh, \
                (stage / "observations.json").open("w", encoding="utf-8") as side:
            write_binned(series, fh, side)
        _write_json(stage / "resolved-config.json", config)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seizfit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, emit_default):
        p.add_argument("--out", required=True, help="output directory (must not exist or be empty)")
        p.add_argument("--rtol", type=float, default=1e-6)
        p.add_argument("--atol", type=float, default=1e-9)
        if emit_default is not None:
            p.add_argument("--emit", type=_emit_set, default=_emit_set(emit_default),
                           help="comma separated subset of json,csv,svg")
            p.add_argument("--window", type=_positive_int, default=None,
                           help="truncate CSV and figures to the first N bins")

    fit = sub.add_parser("fit", help="fit a model to observed counts")
    common(fit, "json,csv,svg")
    fit.add_argument("--input", required=True, help="events CSV/JSONL or pre-binned CSV")
    fit.add_argument("--format", choices=["auto", "csv", "jsonl", "binned"], default="auto")
    fit.add_argument("--sidecar", help="metadata JSON of a pre-binned CSV (default: input with .json suffix)")
    fit.add_argument("--t0", help="window start for event input (default: first event)")
    fit.add_argument("--model", choices=[k.value for k in ModelKind], default="seiz")
    fit.add_argument("--bin-seconds", type=float, default=DEFAULT_BIN_SECONDS)
    fit.add_argument("--bounds", type=_json_arg, help='JSON {"name": [low, high]} or a JSON file')
    fit.add_argument("--pin", type=_json_arg, help='JSON {"name": value} of entries held fixed')
    fit.add_argument("--theta-init", type=_json_arg, help="JSON start vector by name")
    fit.add_argument("--starts", type=_positive_int, default=16)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--ftol", type=float, default=1e-8)
    fit.add_argument("--xtol", type=float, default=1e-8)
    fit.add_argument("--gtol", type=float, default=1e-8)
    fit.add_argument("--max-iter", type=_positive_int, default=200)
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="integrate a model at given parameters")
    common(sim, "csv,svg")
    sim.add_argument("--model", choices=[k.value for k in ModelKind], default="seiz")
    sim.add_argument("--theta", type=_json_arg,
                     help="JSON parameters and initial state by name (default: reference SEIZ fit)")
    sim.add_argument("--bins", type=_positive_int, default=200)
    sim.set_defaults(func=cmd_simulate)

    gen = sub.add_parser("generate", help="write a synthetic pre-binned SEIZ series")
    common(gen, None)
    gen.add_argument("--theta", type=_json_arg, help="JSON SEIZ parameters and initial state by name")
    gen.add_argument("--bins", type=_positive_int, default=200)
    gen.add_argument("--noise", type=float, default=None, help="relative Gaussian noise level")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--bin-seconds", type=float, default=DEFAULT_BIN_SECONDS)
    gen.add_argument("--t0", help="nominal start instant (default 2020-06-01T00:00:00Z)")
    gen.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (SeizfitError, OSError, ValueError, KeyError) as exc:
        print(f"seizfit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR

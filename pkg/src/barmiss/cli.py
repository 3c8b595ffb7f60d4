"""Command-line entry point: ``barmiss <subcommand> [flags]``.

Every subcommand writes into ``--out`` (a directory) and echoes its resolved
configuration there as ``<subcommand>.config.json``.  Usage errors (bad flags,
missing or malformed inputs) exit with 2, runtime failures with 1; both print
a one-line JSON error object on stderr.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from . import __version__
from .errors import BarmissError, ConfigurationError, IngestError
from .filter import FilterConfig, filter_predict
from .harness import EXPERIMENTS, ExperimentSpec, preset, run_chicago, run_experiment
from .ingest import ColumnMap, SplitSpec, bin_events, read_incidents, split_and_mask, top_k_nodes
from .loss import LossSpec
from .model import EventMatrix, MissingnessSpec, NetworkModel, apply_missingness, simulate_bar
from .optimize import FitConfig, fit_network

log = logging.getLogger("barmiss")


class UsageError(BarmissError):
    """Bad flags or unusable input files (exit code 2)."""


def build_hash() -> str:
    h = hashlib.sha256()
    root = Path(__file__).parent
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _echo_config(args, extra: dict | None = None) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg["version"] = f"{__version__}+{build_hash()}"
    cfg.update(extra or {})
    _write_json(args.out / f"{args.command}.config.json", cfg)


def _load_events(path) -> EventMatrix:
    try:
        return EventMatrix.from_csv(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read event matrix {path}: {exc}") from exc


def _load_model(path) -> NetworkModel:
    try:
        return NetworkModel.from_json(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read model {path}: {exc}") from exc


def parse_p(value: str, node_ids=None) -> np.ndarray:
    """A scalar, or a CSV with columns ``node,p`` matched against ``node_ids``."""
    try:
        return np.array([float(value)])
    except ValueError:
        pass
    try:
        with open(value, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise UsageError(f"--p-hat/--p is neither a number nor a readable CSV: {value}") from exc
    if len(rows) < 2 or len(rows[0]) != 2:
        raise UsageError(f"{value}: expected a header and two columns (node, p)")
    try:
        table = {r[0].strip(): float(r[1]) for r in rows[1:]}
    except ValueError as exc:
        raise UsageError(f"{value}: {exc}") from exc
    if node_ids is None:
        return np.array(list(table.values()))
    missing = [n for n in node_ids if n not in table]
    if missing:
        raise UsageError(f"{value}: no probability for nodes {missing}")
    return np.array([table[n] for n in node_ids])


# ---------------------------------------------------------------- subcommands

def cmd_simulate(args) -> None:
    model = _load_model(args.model)
    x0 = None if args.x0 is None else _load_events(args.x0).data[:, -1]
    x = simulate_bar(model, args.T, x0=x0, seed=args.seed, burn_in=args.burn_in)
    x.to_csv(args.out / "events.csv")
    _echo_config(args)


def cmd_corrupt(args) -> None:
    x = _load_events(args.events)
    spec = MissingnessSpec(parse_p(args.p, x.node_ids))
    z, w = apply_missingness(x, spec, seed=args.seed)
    z.to_csv(args.out / "observed.csv")
    w.to_csv(args.out / "mask.csv")
    _echo_config(args)


def cmd_ingest(args) -> None:
    columns = ColumnMap(args.date_column, args.type_column, args.node_column)
    try:
        records, report = read_incidents(args.incidents, columns, args.type)
    except OSError as exc:
        raise UsageError(str(exc)) from exc
    report.to_json(args.out / "ingest-report.json")
    nodes = args.nodes.split(",") if args.nodes else top_k_nodes(records, args.k)
    origin = datetime.fromisoformat(args.origin) if args.origin else None
    binned = bin_events(records, timedelta(days=args.bin_days), origin, nodes, args.n_bins)
    binned.events.to_csv(args.out / "events.csv")
    extra = {"resolved_nodes": nodes, "n_bins_out": binned.events.T,
             "n_out_of_span": binned.n_out_of_span, "n_other_nodes": binned.n_other_nodes}
    if args.split:
        train, test = (int(v) for v in args.split.split(","))
        x_train, z_train, x_test = split_and_mask(binned.events, SplitSpec(train, test, args.mask_p, args.seed))
        x_train.to_csv(args.out / "train.csv")
        z_train.to_csv(args.out / "train_observed.csv")
        x_test.to_csv(args.out / "test.csv")
    _echo_config(args, extra)


def _lambda(text: str):
    if text == "auto":
        return "auto"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'auto', got {text!r}")


def cmd_fit(args) -> None:
    data = _load_events(args.events)
    if args.loss == "complete":
        spec = LossSpec.complete(args.intercept)
    elif args.loss == "truncated":
        spec = LossSpec.truncated(args.q, args.intercept)
    else:
        if args.p_hat is None:
            raise UsageError("--loss unbiased needs --p-hat")
        spec = LossSpec.unbiased(args.q, parse_p(args.p_hat, data.node_ids), args.intercept)
    warm = _load_model(args.warm) if args.warm else None
    init = "warm" if warm is not None else args.init
    cfg = FitConfig(lam=args.lam, lambda_theory=args.lambda_theory, radius=args.radius,
                    max_iters=args.max_iters, tol=args.tol, seed=args.seed, init=init, warm=warm)
    report = fit_network(spec, data, cfg, threads=args.threads)
    report.model.to_json(args.out / "model.json")
    _write_json(args.out / "fit-report.json", report.to_dict())
    _echo_config(args, {"resolved_lambda": report.lam, "loss_label": spec.label()})


def cmd_filter(args) -> None:
    model = _load_model(args.model)
    z = _load_events(args.observed)
    x0 = None if args.x0 is None else _load_events(args.x0).data[:, -1]
    cfg = FilterConfig(args.particles, MissingnessSpec(parse_p(args.p_hat, z.node_ids)),
                       args.resample_threshold, args.seed)
    out = filter_predict(model, z, cfg, x0=x0)
    out.to_csv(args.out / "predictive.csv", list(z.node_ids))
    summary = out.summary()
    summary["expected_events_scaled"] = out.expected_event_total / args.scale
    _write_json(args.out / "filter-summary.json", summary)
    _echo_config(args)


def cmd_experiment(args) -> None:
    if args.name == "chicago":
        if args.data is None:
            raise UsageError("experiment run chicago needs --data <incidents.csv>")
        result = run_chicago(args.data, args.out, seed=args.seed)
        _echo_config(args, {"expected_events": result["expected_events"]})
        return
    spec = preset(args.name, args.paper_scale)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read experiment config {args.config}: {exc}") from exc
        spec = ExperimentSpec.from_dict({**spec.to_dict(), **overrides})
    changes = {"seed": args.seed, "threads": args.threads}
    if args.trials is not None:
        changes["trials"] = args.trials
    spec = dataclasses.replace(spec, **changes)
    table = run_experiment(spec, args.out)
    _echo_config(args, {"experiment": spec.to_dict(), "n_rows": len(table.raw)})


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker cap; outputs do not depend on it")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="barmiss", description="Sparse BAR network estimation from thinned event data.")
    parser.add_argument("--version", action="version", version=f"barmiss {__version__} (build {build_hash()})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="model JSON -> event matrix CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--burn-in", type=int, default=0)
    p.add_argument("--x0", help="event CSV whose last column is the initial state")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("corrupt", parents=[common], help="thin an event matrix")
    p.add_argument("events")
    p.add_argument("--p", required=True, help="observation probability: scalar or node,p CSV")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("ingest", parents=[common], help="incident CSV -> binned event matrix")
    p.add_argument("incidents")
    p.add_argument("--type", default=None, help="keep rows whose type column matches (case-insensitive)")
    p.add_argument("--k", type=int, default=9, help="number of most active nodes to keep")
    p.add_argument("--nodes", help="explicit comma-separated node keys (overrides --k)")
    p.add_argument("--bin-days", type=float, default=7.0)
    p.add_argument("--origin", help="ISO timestamp of the first bin edge")
    p.add_argument("--n-bins", type=int)
    p.add_argument("--split", help="TRAIN,TEST bin counts")
    p.add_argument("--mask-p", type=float, default=1.0, help="thinning applied to the training block")
    p.add_argument("--date-column", default=ColumnMap.date)
    p.add_argument("--type-column", default=ColumnMap.primary_type)
    p.add_argument("--node-column", default=ColumnMap.node)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit", parents=[common], help="estimate (nu, A) from an event matrix")
    p.add_argument("events")
    p.add_argument("--loss", choices=["complete", "truncated", "unbiased"], default="unbiased")
    p.add_argument("--q", type=int, default=2)
    p.add_argument("--p-hat", help="scalar or node,p_hat CSV")
    p.add_argument("--lambda", dest="lam", type=_lambda, default="auto")
    p.add_argument("--lambda-theory", type=float, metavar="C", help="use the theory-form lambda with constant C")
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--intercept", action="store_true")
    p.add_argument("--init", choices=["zero", "random"], default="zero")
    p.add_argument("--warm", help="model JSON to start from")
    p.add_argument("--max-iters", type=int, default=10000)
    p.add_argument("--tol", type=float, default=1e-8)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("filter", parents=[common], help="one-step predictive probabilities")
    p.add_argument("observed")
    p.add_argument("--model", required=True)
    p.add_argument("--p-hat", default="1.0", help="scalar or node,p_hat CSV")
    p.add_argument("--particles", type=int, default=1000)
    p.add_argument("--resample-threshold", type=float, default=0.5)
    p.add_argument("--scale", type=float, default=1.0, help="divide the expected total by this")
    p.add_argument("--x0", help="event CSV whose last column is the state before week 0")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("experiment", help="simulation studies")
    esub = p.add_subparsers(dest="action", required=True)
    e = esub.add_parser("run", parents=[common])
    e.add_argument("name", choices=list(EXPERIMENTS) + ["chicago"])
    e.add_argument("--config", help="JSON overrides for the experiment spec")
    e.add_argument("--paper-scale", action="store_true")
    e.add_argument("--trials", type=int)
    e.add_argument("--data", help="incident CSV (chicago only)")
    e.set_defaults(func=cmd_experiment)
    return parser


def _fail(code: int, exc: BaseException, command: str | None) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "command": command}
    for attr in ("iteration", "row"):
        if getattr(exc, attr, None) is not None:
            err[attr] = getattr(exc, attr)
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        return _fail(2, ConfigurationError("--threads must be >= 1"), args.command)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        args.func(args)
    except (UsageError, ConfigurationError, IngestError, FileNotFoundError) as exc:
        return _fail(2, exc, args.command)
    except Exception as exc:  # runtime failure: report with context
        return _fail(1, exc, args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Every command writes its results and a ``run_manifest.json`` into ``--out``.
Exit codes: 0 success, 1 stage error, 2 missing input or bad arguments.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .benchmarks import BENCHMARKS, counterfactual_economy, firm_data_benchmark
from .counterfactual import SCENARIOS, run_scenarios, summarize, write_structure_series, write_summary
from .ctmc import (read_event_log, read_panel, sample_at_intervals, simulate_trajectory,
                   write_event_log, write_panel)
from .estimation import (EstimationError, Theta, build_neighborhood_network, candidate_links, greedy_network_search,
                         maximize_likelihood, read_firm_panel, read_geography, read_network,
                         standard_errors, write_firm_data, write_network, write_trace)
from .identification import IdentifyOptions, Thresholds, load_anchors, identify_pipeline, write_evidence
from .model import (STATE_CAP, ModelError, identifiable_network, load_model, random_model,
                    random_network, save_model, validate_assumptions)
from .recovery import (ccp_from_events, decompose_rate_matrix, estimate_transition_matrix,
                       exact_ccp_table, generator_from_panel, read_ccp_table, write_ccp_table)


class MissingInput(Exception):
    pass


def _dump(doc, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _hash(path) -> str:
    h = hashlib.sha256()
    for p in [Path(path)] + sorted(Path(path).parent.glob(Path(path).name + ".json")):
        if p.exists():
            h.update(p.read_bytes())
    return h.hexdigest()


def _need(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise MissingInput(f"input file not found: {p}")


def _manifest(args, out: Path, inputs: dict, seeds: dict) -> None:
    settings = {k: v for k, v in sorted(vars(args).items())
                if k not in ("func", "out", "threads") and k not in inputs}
    doc = {
        "command": args.command,
        "settings": settings,
        "seeds": seeds,
        "inputs": {k: {"name": Path(v).name, "sha256": _hash(v)} for k, v in sorted(inputs.items()) if v},
        "versions": {"peerchoice": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": ".".join(platform.python_version_tuple()[:2])},
    }
    _dump(doc, out / "run_manifest.json")


# ---------------------------------------------------------------- commands

def cmd_generate(args, out: Path) -> dict:
    if args.firm_data:
        panel, geo, theta, _ = firm_data_benchmark(args.markets, args.horizon, args.seed, args.k_nearest)
        write_firm_data(panel, geo, out)
        _dump(theta.to_dict(panel.firms, panel.cov_names), out / "theta_true.json")
        return {}
    if args.benchmark:
        model = BENCHMARKS[args.benchmark]()
    else:
        if args.agents < 2:
            raise ModelError("a network needs at least two agents")
        rng = np.random.default_rng(args.seed)
        if args.identifiable:
            net = lambda g: identifiable_network(args.agents, args.menu, g)  # noqa: E731
        else:
            net = lambda g: random_network(args.agents, g)  # noqa: E731
        model = random_model(args.agents, args.menu, rng, network=net, max_tries=args.max_tries)
    save_model(model, out / "model.json")
    _dump(validate_assumptions(model).to_dict(), out / "validation.json")
    return {}


def cmd_validate(args, out: Path) -> dict:
    _need(args.model)
    report = validate_assumptions(load_model(args.model))
    _dump(report.to_dict(), out / "validation.json")
    if not report.passed:
        bad = ", ".join(f"agent {c.agent} {c.clause}" for c in report.failures())
        raise ModelError(f"model fails: {bad}")
    return {"model": args.model}


def cmd_simulate(args, out: Path) -> dict:
    _need(args.model)
    model = load_model(args.model)
    initial = args.initial or [0] * model.n_agents
    log = simulate_trajectory(model, initial, args.horizon, args.seed, state_cap=args.state_cap)
    write_event_log(log, out / "events.csv")
    if args.delta:
        write_panel(sample_at_intervals(log, args.delta), out / "panel.csv")
    return {"model": args.model}


def cmd_recover(args, out: Path) -> dict:
    sources = [x for x in (args.model, args.events, args.panel) if x]
    if len(sources) != 1:
        raise ModelError("give exactly one of --model, --events, --panel")
    _need(*sources)
    diag = {}
    if args.model:
        table = exact_ccp_table(load_model(args.model), args.state_cap)
        diag["source"] = "exact"
    elif args.events:
        _, table, diag = ccp_from_events(read_event_log(args.events))
        diag["source"] = "events"
    else:
        panel = read_panel(args.panel)
        if args.delta and abs(args.delta - panel.delta) > 1e-12:
            raise ModelError(f"--delta {args.delta} disagrees with the panel interval {panel.delta}")
        P, _ = estimate_transition_matrix(panel)
        rates, rdiag = generator_from_panel(P, panel.delta, panel.menu_size, panel.n_agents)
        _, table = decompose_rate_matrix(rates, tol=args.tol)
        diag = {"source": "panel", **rdiag.to_dict()}
    write_ccp_table(table, out / "ccp.csv")
    _dump(diag, out / "recovery.json")
    return {"model": args.model, "events": args.events, "panel": args.panel}


def _load_known(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return {int(d["agent"]): (d["side"], tuple(int(p) for p in d["peers"])) for d in doc}


def cmd_identify(args, out: Path) -> dict:
    _need(args.ccp, args.anchor_file, args.known_file)
    table = read_ccp_table(args.ccp)
    th = Thresholds(mode=args.mode, tol=args.tol, z=args.z, threshold=args.threshold)
    opts = IdentifyOptions(th, args.exhaustive,
                           load_anchors(args.anchor_file) if args.anchor_file else {},
                           _load_known(args.known_file) if args.known_file else {})
    result = identify_pipeline(table, opts)
    _dump(result.to_dict(), out / "identified.json")
    write_evidence(result.evidence, out / "evidence.jsonl")
    if result.complete():
        save_model(result.to_model(), out / "model.json")
    return {"ccp": args.ccp, "anchor_file": args.anchor_file, "known_file": args.known_file}


def _firm_inputs(args):
    _need(args.openings, args.markets, args.geo, args.borders)
    geo = read_geography(args.geo, args.borders)
    panel = read_firm_panel(args.openings, args.markets, geo, start=args.start)
    return geo, panel


def cmd_fit(args, out: Path) -> dict:
    _need(args.theta0)
    geo, panel = _firm_inputs(args)
    W = candidate_links(build_neighborhood_network(geo, args.k_nearest), panel.n_firms)
    if args.theta0:
        theta0 = Theta.from_dict(json.loads(Path(args.theta0).read_text(encoding="utf-8")))
        if (theta0.n_firms, theta0.n_cov) != (panel.n_firms, panel.n_cov):
            raise ModelError("--theta0 does not match the data dimensions")
    else:
        theta0 = Theta.zeros(panel.n_firms, panel.n_cov)
    if args.no_search:
        fit = maximize_likelihood(panel, W, theta0)
        trace = []
    else:
        res = greedy_network_search(panel, W, theta0, tie=args.tie, max_rounds=args.max_rounds)
        W, fit, trace = res.W, res.fit, res.trace
    try:
        se = standard_errors(fit.theta, W, panel)
        doc = fit.theta.to_dict(panel.firms, panel.cov_names, se.se)
        doc["hessian"] = se.report()
    except EstimationError as exc:
        doc = fit.theta.to_dict(panel.firms, panel.cov_names)
        doc["hessian"] = {"error": str(exc)}
    doc["loglik"] = fit.loglik
    doc["fit"] = fit.report()
    _dump(doc, out / "theta.json")
    write_network(W, panel, out / "network.json")
    write_trace(trace, out / "search_trace.jsonl")
    return {"openings": args.openings, "markets": args.markets, "geo": args.geo, "borders": args.borders,
            "theta0": args.theta0}


def cmd_counterfact(args, out: Path) -> dict:
    if args.benchmark:
        theta, W, n0, S = counterfactual_economy()
        horizon = args.horizon or 300
        inputs = {}
    else:
        if not (args.theta and args.network and args.openings):
            raise ModelError("give --theta, --network and the data files, or --benchmark")
        _need(args.theta, args.network)
        _, panel = _firm_inputs(args)
        theta = Theta.from_dict(json.loads(Path(args.theta).read_text(encoding="utf-8")))
        W = read_network(args.network, panel)
        n0 = panel.n0
        S = panel.cov_values[-1]
        horizon = args.horizon or int(np.ceil(panel.horizon))
        inputs = {"theta": args.theta, "network": args.network, "openings": args.openings,
                  "markets": args.markets, "geo": args.geo, "borders": args.borders}
    scenarios = args.scenario or list(SCENARIOS)
    series = run_scenarios(theta, W, n0, S, int(horizon), args.replications, args.seed, scenarios)
    write_structure_series(series, out / "structure_series.csv")
    write_summary(summarize(series, args.levels), out / "summary.json")
    return inputs


# ---------------------------------------------------------------- parser

def _add_data_flags(p) -> None:
    p.add_argument("--openings", help="openings.csv (date, firm, market)")
    p.add_argument("--markets", help="markets.csv (market, date, covariates)")
    p.add_argument("--geo", help="geo.csv (market, province, lat, lon)")
    p.add_argument("--borders", help="borders.csv (market_a, market_b)")
    p.add_argument("--start", help="first day of the sample; earlier openings are initial stores")


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=0)
    shared.add_argument("--out", required=True, help="output directory")
    shared.add_argument("--threads", type=int, default=1, help="accepted for compatibility; runs are single-threaded")
    shared.add_argument("--state-cap", type=int, default=STATE_CAP)

    ap = argparse.ArgumentParser(prog="peerchoice", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[shared], help="random validator-passing model")
    p.add_argument("--agents", type=int, default=3)
    p.add_argument("--menu", type=int, default=2, help="number of nondefault alternatives")
    p.add_argument("--identifiable", action="store_true", help="draw networks that the identification steps can resolve")
    p.add_argument("--benchmark", choices=sorted(BENCHMARKS))
    p.add_argument("--max-tries", type=int, default=1000)
    p.add_argument("--firm-data", action="store_true", help="write simulated two-firm opening data instead")
    p.add_argument("--markets", type=int, default=4)
    p.add_argument("--horizon", type=float, default=2000.0)
    p.add_argument("--k-nearest", type=int, default=1)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("validate", parents=[shared], help="check the modelling assumptions")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", parents=[shared], help="simulate clock rings")
    p.add_argument("--model", required=True)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--delta", type=float, help="also write snapshots at this interval")
    p.add_argument("--initial", type=int, nargs="+")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("recover-ccp", parents=[shared], help="choice probabilities from a model, events or a panel")
    p.add_argument("--model")
    p.add_argument("--events")
    p.add_argument("--panel")
    p.add_argument("--delta", type=float)
    p.add_argument("--tol", type=float, default=1e-6, help="tolerance of the generator split")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("identify", parents=[shared], help="network and primitives from choice probabilities")
    p.add_argument("--ccp", required=True)
    p.add_argument("--mode", choices=("exact", "statistical"), default="exact")
    p.add_argument("--threshold", type=float, help="fixed cutoff on |log difference| in statistical mode")
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--z", type=float, default=3.0)
    p.add_argument("--anchor-file")
    p.add_argument("--known-file", help="JSON list of {agent, side: nr|nc, peers} for one-alternative menus")
    p.add_argument("--exhaustive", action="store_true", default=None)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("fit", parents=[shared], help="maximum likelihood with network search")
    _add_data_flags(p)
    p.add_argument("--k-nearest", type=int, default=5)
    p.add_argument("--tie", action="store_true", help="one link set shared by both firms")
    p.add_argument("--no-search", action="store_true")
    p.add_argument("--theta0", help="starting values; entries marked not free stay fixed")
    p.add_argument("--max-rounds", type=int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("counterfact", parents=[shared], help="market-structure scenarios")
    _add_data_flags(p)
    p.add_argument("--theta")
    p.add_argument("--network")
    p.add_argument("--benchmark", action="store_true", help="use the built-in two-firm economy")
    p.add_argument("--scenario", action="append", choices=SCENARIOS)
    p.add_argument("--horizon", type=int)
    p.add_argument("--replications", type=int, default=20)
    p.add_argument("--levels", type=float, nargs="+", default=[0.25, 0.5, 0.75])
    p.set_defaults(func=cmd_counterfact)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        inputs = args.func(args, out)
        _manifest(args, out, inputs, {"seed": args.seed})
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Every path is relative to ``--workspace``.  Simulation settings come from
SimConfig defaults, then the ``[sim]`` section of ``--config``, then
``RIDEPOOL_<FIELD>`` environment variables, then ``--set field=value`` and
the explicit flags.  Each command writes a JSON manifest next to its output.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

import ridepool
from ridepool.calibration import calibrate, read_calibration
from ridepool.demand import DemandStats, ingest_trip_records, synthesize_demand, write_requests
from ridepool.experiments import DemandModel
from ridepool.road_network import ClusterAssignment, RoadNetwork, cluster_intersections, generate_grid_city, largest_scc
from ridepool.simulator import (
    Scenario,
    SimConfig,
    aggregate_runs,
    bellman_gap_report,
    read_metrics_csv,
    run_episode,
    write_metrics_csv,
)
from ridepool.training import TrainConfig, train
from ridepool.value_fn import ValueNet

logger = logging.getLogger("ridepool")

ENV_PREFIX = "RIDEPOOL_"
MANIFEST_VERSION = 1


class CliError(Exception):
    pass


# -- configuration -------------------------------------------------------------


def _coerce(field: dataclasses.Field, text: str):
    kind = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", str(field.type))
    text = text.strip()
    if "None" in kind and text.lower() in ("", "none"):
        return None
    if kind.startswith("bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise CliError(f"{field.name}: expected a boolean, got {text!r}")
    try:
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise CliError(f"{field.name}: cannot parse {text!r} as {kind}") from None
    return text


def resolve_config(config_file: Path | None, overrides: Sequence[str] = (), env=None, **flags) -> SimConfig:
    fields = {f.name: f for f in dataclasses.fields(SimConfig)}
    values: dict = {}
    if config_file is not None:
        if not config_file.is_file():
            raise CliError(f"config file not found: {config_file}")
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keys mirror SimConfig fields verbatim, including case
        parser.read(config_file)
        if parser.has_section("sim"):
            for key, text in parser.items("sim"):
                if key not in fields:
                    raise CliError(f"{config_file}: unknown [sim] key {key!r}")
                values[key] = _coerce(fields[key], text)
    env = os.environ if env is None else env
    for name, f in fields.items():
        key = ENV_PREFIX + name.upper()
        if key in env:
            values[name] = _coerce(f, env[key])
    for item in overrides:
        name, sep, text = item.partition("=")
        if not sep or name not in fields:
            raise CliError(f"--set expects field=value with a SimConfig field, got {item!r}")
        values[name] = _coerce(fields[name], text)
    values.update({k: v for k, v in flags.items() if v is not None})
    try:
        return SimConfig(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from None


# -- workspace helpers ------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    return {"ridepool": ridepool.__version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _need(ws: Path, rel: str) -> Path:
    path = ws / rel
    if not path.exists():
        raise CliError(f"missing input file: {path}")
    return path


def write_manifest(ws: Path, rel: str, command: str, config: SimConfig | None, params: dict,
                   inputs: dict, outputs: dict) -> Path:
    manifest = {
        "version": MANIFEST_VERSION,
        "command": command,
        "config": dataclasses.asdict(config) if config is not None else None,
        "params": params,
        "inputs": {k: {"path": v, "sha256": _sha256(ws / v)} for k, v in inputs.items() if v is not None},
        "outputs": {k: {"path": v, "sha256": _sha256(ws / v)} for k, v in outputs.items()},
        "versions": _versions(),
    }
    path = ws / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_scenario(ws: Path, network: str, clusters: str, stats: str, config: SimConfig) -> Scenario:
    net = RoadNetwork.load(_need(ws, network))
    cl = ClusterAssignment.from_csv(_need(ws, clusters), net)
    T = config.horizon if config.return_horizon is None else config.return_horizon
    st = DemandStats.from_csv(_need(ws, stats), config.gamma, T)
    return Scenario(net, cl, st)


def load_paths(ws: Path, rels: Sequence[str], net: RoadNetwork, delta: float):
    return [ingest_trip_records(_need(ws, r), net, delta).requests for r in rels]


def _expand(ws: Path, patterns: Sequence[str]) -> list[str]:
    out = []
    for p in patterns:
        hits = sorted(str(q.relative_to(ws)) for q in ws.glob(p)) if any(c in p for c in "*?[") else [p]
        if not hits:
            raise CliError(f"no files match {ws / p}")
        out.extend(hits)
    return out


# -- commands -----------------------------------------------------------------------


def cmd_gen_city(args, ws: Path) -> None:
    config = resolve_config(args.config_path, args.set, K=args.K)
    if args.from_file:
        net = largest_scc(RoadNetwork.load(_need(ws, args.from_file)))
    else:
        net = generate_grid_city(args.rows, args.cols, args.edge_time, seed=args.seed)
    clusters = cluster_intersections(net, config.K, seed=args.seed)
    (ws / args.network).parent.mkdir(parents=True, exist_ok=True)
    net.save(ws / args.network)
    clusters.to_csv(ws / args.clusters)
    logger.info("network with %d intersections, %d clusters", len(net), clusters.K)
    write_manifest(ws, args.manifest, "gen-city", config,
                   {"rows": args.rows, "cols": args.cols, "edge_time": args.edge_time, "seed": args.seed},
                   {"source": args.from_file}, {"network": args.network, "clusters": args.clusters})


def cmd_gen_demand(args, ws: Path) -> None:
    config = resolve_config(args.config_path, args.set)
    net = RoadNetwork.load(_need(ws, args.network))
    clusters = ClusterAssignment.from_csv(_need(ws, args.clusters), net)
    out_dir = ws / args.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    if args.ingest:
        result = ingest_trip_records(_need(ws, args.ingest), net, config.delta, args.t0)
        rel = f"{args.out_dir}/{args.prefix}_ingested.csv"
        write_requests(ws / rel, result.requests, config.delta)
        written["ingested"] = rel
        paths = [result.requests]
        logger.info("ingested %d requests (%d malformed, %d same origin and destination)",
                    len(result.requests), result.malformed, result.same_od)
    else:
        model = DemandModel(args.base_rate, args.peak_rate, hotspots=args.hotspots)
        rates = model.rates(config.horizon)
        weights = model.origin_weights(clusters.K, args.seed)
        paths = []
        for k in range(args.paths):
            reqs = synthesize_demand(net, clusters, rates, args.seed + k, origin_weights=weights)
            rel = f"{args.out_dir}/{args.prefix}_{k:03d}.csv"
            write_requests(ws / rel, reqs, config.delta)
            written[f"path_{k:03d}"] = rel
            paths.append(reqs)
    T = config.horizon if config.return_horizon is None else config.return_horizon
    if args.stats:
        stats = DemandStats.from_paths(paths, clusters, config.horizon, config.gamma, T)
        stats.to_csv(ws / args.stats)
        written["stats"] = args.stats
    write_manifest(ws, args.manifest, "gen-demand", config,
                   {"seed": args.seed, "paths": args.paths, "base_rate": args.base_rate,
                    "peak_rate": args.peak_rate, "hotspots": args.hotspots},
                   {"network": args.network, "clusters": args.clusters, "ingest": args.ingest}, written)


def cmd_train(args, ws: Path) -> None:
    config = resolve_config(args.config_path, args.set, seed=args.seed)
    scenario = load_scenario(ws, args.network, args.clusters, args.stats, config)
    demand = _expand(ws, args.demand)
    paths = load_paths(ws, demand, scenario.net, config.delta)
    tcfg = TrainConfig(episodes=args.episodes, seed=args.seed, learning_rate=args.lr, batch_size=args.batch_size)
    out = ws / args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    train(scenario, config, paths, tcfg, variant=args.variant, checkpoint_path=out)
    write_manifest(ws, args.manifest, "train", config,
                   {"variant": args.variant, "train": dataclasses.asdict(tcfg)},
                   {"network": args.network, "clusters": args.clusters, "stats": args.stats,
                    **{f"demand_{i:03d}": d for i, d in enumerate(demand)}},
                   {"model": args.out})


def cmd_calibrate(args, ws: Path) -> None:
    config = resolve_config(args.config_path, args.set, seed=args.seed, mode="cevd")
    scenario = load_scenario(ws, args.network, args.clusters, args.stats, config)
    net = ValueNet.load(_need(ws, args.model))
    demand = _expand(ws, args.demand)
    paths = load_paths(ws, demand, scenario.net, config.delta)
    cal = calibrate(scenario, config, net, paths, args.lambda_samples, args.alpha_samples, args.seed,
                    args.criterion, grid=args.grid)
    cal.to_csv(ws / args.out)
    lam, alpha = cal.params
    logger.info("lambda* = %r, alpha* = %r", lam, alpha)
    write_manifest(ws, args.manifest, "calibrate", config,
                   {"lambda_samples": args.lambda_samples, "alpha_samples": args.alpha_samples,
                    "criterion": args.criterion, "grid": args.grid, "seed": args.seed,
                    "best_lambda": lam, "best_alpha": alpha},
                   {"network": args.network, "clusters": args.clusters, "stats": args.stats, "model": args.model,
                    **{f"demand_{i:03d}": d for i, d in enumerate(demand)}},
                   {"calibration": args.out})


def _simulate(ws: Path, config: SimConfig, inputs: dict, out: str) -> None:
    scenario = load_scenario(ws, inputs["network"], inputs["clusters"], inputs["stats"], config)
    net = ValueNet.load(_need(ws, inputs["model"])) if inputs.get("model") else None
    paths = load_paths(ws, [inputs["demand"]], scenario.net, config.delta)
    ep = run_episode(config, net, paths[0], scenario)
    (ws / out).parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(ws / out, ep.metrics)
    logger.info("%s: served %d of %d", out, ep.total_served, sum(m.arrived for m in ep.metrics))


def cmd_simulate(args, ws: Path) -> None:
    if args.manifest_in:
        manifest = json.loads(_need(ws, args.manifest_in).read_text())
        if manifest.get("command") != "simulate":
            raise CliError(f"{ws / args.manifest_in} is not a simulate manifest")
        config = SimConfig(**manifest["config"])
        inputs = {k: v["path"] for k, v in manifest["inputs"].items()}
        for k, v in manifest["inputs"].items():
            if _sha256(_need(ws, v["path"])) != v["sha256"]:
                logger.warning("input %s changed since the manifest was written", v["path"])
        out = args.out or manifest["outputs"]["metrics"]["path"]
        _simulate(ws, config, inputs, out)
        if args.manifest:
            write_manifest(ws, args.manifest, "simulate", config, manifest["params"], inputs, {"metrics": out})
        return
    flags = {"seed": args.seed, "mode": args.mode}
    params = {}
    if args.calibration:
        lam, alpha = read_calibration(_need(ws, args.calibration))
        flags.update(lam=lam, alpha=alpha)
        params.update(best_lambda=lam, best_alpha=alpha)
    config = resolve_config(args.config_path, args.set, **flags)
    if config.mode != "myopic" and not args.model:
        raise CliError(f"mode {config.mode!r} needs --model")
    inputs = {"network": args.network, "clusters": args.clusters, "stats": args.stats,
              "demand": args.demand, "model": args.model if config.mode != "myopic" else None,
              "calibration": args.calibration}
    out = args.out or "runs/metrics.csv"
    _simulate(ws, config, inputs, out)
    write_manifest(ws, args.manifest or str(Path(out).with_suffix(".manifest.json")), "simulate", config, params,
                   {k: v for k, v in inputs.items() if v}, {"metrics": out})


def cmd_report(args, ws: Path) -> None:
    config = resolve_config(args.config_path, args.set)
    runs: dict[str, list] = {}
    for item in args.runs:
        name, sep, pattern = item.partition("=")
        if not sep:
            raise CliError(f"--runs expects name=glob, got {item!r}")
        runs[name] = [read_metrics_csv(ws / f) for f in _expand(ws, [pattern])]
    summary = aggregate_runs(runs, args.window)
    out_dir = ws / args.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {}
    with open(out_dir / "moving_average.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "epoch", "served_moving_average"])
        for name, s in summary.items():
            for t, v in enumerate(s.moving_average):
                w.writerow([name, t, repr(v)])
    outputs["moving_average"] = f"{args.out_dir}/moving_average.csv"
    for name, episodes in runs.items():
        rel = f"{args.out_dir}/gap_{name}.csv"
        bellman_gap_report(episodes[0], config.gamma, config.return_horizon).to_csv(ws / rel)
        outputs[f"gap_{name}"] = rel
    payload = {name: dataclasses.asdict(s) | {"mean_gap": float(np.mean(
        [bellman_gap_report(ep, config.gamma, config.return_horizon).mean_gap for ep in runs[name]]))}
        for name, s in summary.items()}
    (out_dir / "summary.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    outputs["summary"] = f"{args.out_dir}/summary.json"
    for name, s in summary.items():
        print(f"{name}: runs={s.runs} served={s.mean_served:.2f} +/- {s.std_served:.2f} "
              f"gap={payload[name]['mean_gap']:.3f}")
    write_manifest(ws, f"{args.out_dir}/manifest.json", "report", config, {"window": args.window}, {}, outputs)


def cmd_oracle_check(args, ws: Path) -> int:
    from ridepool import oracles

    failures = oracles.run_all(args.instances, args.seed)
    for name, problems in failures.items():
        status = "ok" if not problems else f"FAILED ({len(problems)})"
        print(f"{name}: {status}")
        for p in problems[:5]:
            print(f"  {p}")
    return 1 if any(failures.values()) else 0


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ridepool", description=__doc__.splitlines()[0])
    p.add_argument("--workspace", default=".", help="directory all paths are relative to")
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", dest="config_path", default=None, help="INI file with a [sim] section")
    common.add_argument("--set", action="append", default=[], metavar="FIELD=VALUE",
                        help="override one SimConfig field")
    scen = argparse.ArgumentParser(add_help=False)
    scen.add_argument("--network", default="network.txt")
    scen.add_argument("--clusters", default="clusters.csv")
    scen.add_argument("--stats", default="demand_stats.csv")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("gen-city", parents=[common], help="grid or file network plus clusters")
    c.add_argument("--rows", type=int, default=8)
    c.add_argument("--cols", type=int, default=8)
    c.add_argument("--edge-time", type=float, default=60.0)
    c.add_argument("--from-file", default=None, help="network file to load instead of a grid")
    c.add_argument("--K", type=int, default=None)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--network", default="network.txt")
    c.add_argument("--clusters", default="clusters.csv")
    c.add_argument("--manifest", default="gen-city.manifest.json")
    c.set_defaults(func=cmd_gen_city)

    d = sub.add_parser("gen-demand", parents=[common], help="synthetic demand paths or trip-record ingest")
    d.add_argument("--network", default="network.txt")
    d.add_argument("--clusters", default="clusters.csv")
    d.add_argument("--paths", type=int, default=10)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--base-rate", type=float, default=6.0)
    d.add_argument("--peak-rate", type=float, default=12.0)
    d.add_argument("--hotspots", type=int, default=2)
    d.add_argument("--ingest", default=None, help="trip-record CSV to ingest instead of synthesising")
    d.add_argument("--t0", type=float, default=0.0, help="timestamp of epoch 0 when ingesting")
    d.add_argument("--out-dir", default="demand")
    d.add_argument("--prefix", default="path")
    d.add_argument("--stats", default=None, help="also write g/F statistics of the written paths here")
    d.add_argument("--manifest", default="gen-demand.manifest.json")
    d.set_defaults(func=cmd_gen_demand)

    t = sub.add_parser("train", parents=[common, scen], help="fit a value network")
    t.add_argument("--demand", nargs="+", required=True, help="demand files or globs")
    t.add_argument("--variant", choices=("neuradp", "neuradp+"), default="neuradp+")
    t.add_argument("--episodes", type=int, default=50)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default="model.json")
    t.add_argument("--manifest", default="train.manifest.json")
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("calibrate", parents=[common, scen], help="search lambda then alpha")
    k.add_argument("--model", default="model.json")
    k.add_argument("--demand", nargs="+", required=True, help="validation demand files or globs")
    k.add_argument("--lambda-samples", type=int, default=11)
    k.add_argument("--alpha-samples", type=int, default=21)
    k.add_argument("--criterion", choices=("served", "ilp"), default="served")
    k.add_argument("--grid", action="store_true", help="evenly spaced instead of random samples")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out", default="calibration.csv")
    k.add_argument("--manifest", default="calibrate.manifest.json")
    k.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("simulate", parents=[common, scen], help="run one episode and write metrics")
    s.add_argument("--mode", choices=("myopic", "neuradp", "neuradp+", "cevd"), default=None)
    s.add_argument("--model", default=None)
    s.add_argument("--demand", default=None)
    s.add_argument("--calibration", default=None, help="report whose best lambda/alpha to use")
    s.add_argument("--seed", type=int, default=None, help="initial fleet position seed")
    s.add_argument("--out", default=None)
    s.add_argument("--manifest", default=None, help="where to write this run's manifest")
    s.add_argument("--replay", dest="manifest_in", default=None, help="re-run the simulate manifest at this path")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", parents=[common], help="aggregate metrics and emit plot CSVs")
    r.add_argument("--runs", nargs="+", required=True, metavar="NAME=GLOB")
    r.add_argument("--window", type=int, default=5)
    r.add_argument("--out-dir", default="report")
    r.set_defaults(func=cmd_report)

    o = sub.add_parser("oracle-check", help="brute-force and property checks")
    o.add_argument("--instances", type=int, default=100)
    o.add_argument("--seed", type=int, default=0)
    o.set_defaults(func=cmd_oracle_check)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    ws = Path(args.workspace)
    if not ws.is_dir():
        print(f"ridepool: workspace not found: {ws}", file=sys.stderr)
        return 2
    if getattr(args, "config_path", None):
        args.config_path = ws / args.config_path
    if args.command == "simulate" and not args.manifest_in and not args.demand:
        parser.error("simulate needs --demand or --replay")
    try:
        rc = args.func(args, ws)
    except CliError as exc:
        print(f"ridepool: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"ridepool: {exc}", file=sys.stderr)
        return 1
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())

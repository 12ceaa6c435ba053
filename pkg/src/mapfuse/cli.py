"""Command line driver: match, calibrate, train-predictor, evaluate, downsample, synth.

All pipeline constants are flags with the deployed values as defaults. A
JSON config file can mirror any flag (keys use underscores); explicit flags
win. Exit codes: 0 success, 2 input-format error, 3 empty result.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from typing import Sequence

from . import calibration as cal
from .evaluate import EmptyResultError, cost_index, evaluate_rows
from .history import HistoryStore, Trajectory, load_probes_csv, split_trips
from .matcher import MatcherConfig, MatchSession, read_match_csv, write_match_csv
from .network import InputFormatError, load_network_csv, save_network_csv
from .scoring import FusionWeights
from .synth import generate_synthetic, make_grid_network
from .traffic import SpectralPredictor, read_states_csv, train_spectral, write_states_csv

log = logging.getLogger("mapfuse")

_CONFIG_KEYS = {
    "split_length": 50.0,
    "radius": 170.0,
    "speed_decay": 0.1,
    "collab_spatial": 300.0,
    "collab_temporal": 5.0,
    "neighbor_weight": 1.0,
    "temporal_mode": "time-of-day",
    "update_interval": 300.0,
    "lookback": 3600.0,
    "decay_ratio": 0.8,
    "k_floor": 6,
    "k_cap": 200,
    "trip_gap": 900.0,
    "predictor": "naive",
    "judges": "kinematic,habit,traffic",
    "jobs": 1,
}


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputFormatError(f"{path}: {exc}") from exc
    unknown = set(cfg) - set(_CONFIG_KEYS) - {"weights"}
    if unknown:
        raise InputFormatError(f"{path}: unknown config keys {sorted(unknown)}")
    return cfg


def _resolve(args: argparse.Namespace, config: dict, key: str):
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return _CONFIG_KEYS[key]


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config mirroring these flags (flags win)")
    p.add_argument("--split-length", type=float, dest="split_length",
                   help="edge split length, m (default 50)")
    p.add_argument("--radius", type=float, help="probe vicinity radius, m (default 170)")
    p.add_argument("--speed-decay", type=float, dest="speed_decay",
                   help="speed weight decay coefficient (default 0.1)")
    p.add_argument("--collab-spatial", type=float, dest="collab_spatial",
                   help="collaboration spatial radius, m (default 300)")
    p.add_argument("--collab-temporal", type=float, dest="collab_temporal",
                   help="collaboration temporal radius, s (default 5)")
    p.add_argument("--neighbor-weight", type=float, dest="neighbor_weight",
                   help="collaboration neighbor weight in [0,1] (default 1)")
    p.add_argument("--temporal-mode", choices=["time-of-day", "absolute"],
                   dest="temporal_mode", help="collaboration time comparison")
    p.add_argument("--update-interval", type=float, dest="update_interval",
                   help="traffic state interval, s (default 300)")
    p.add_argument("--lookback", type=float, help="traffic lookback window, s (default 3600)")
    p.add_argument("--decay-ratio", type=float, dest="decay_ratio",
                   help="temporal decay ratio (default 0.8)")
    p.add_argument("--k-floor", type=int, dest="k_floor", help="minimum path budget (default 6)")
    p.add_argument("--k-cap", type=int, dest="k_cap", help="maximum path budget (default 200)")
    p.add_argument("--trip-gap", type=float, dest="trip_gap",
                   help="probe gap that splits trips, s (default 900)")


def _build_matcher_config(args, config: dict, weights: FusionWeights) -> MatcherConfig:
    judges = str(_resolve(args, config, "judges")).split(",")
    judges = {j.strip() for j in judges if j.strip()}
    known = {"kinematic", "habit", "traffic"}
    if not judges <= known:
        raise InputFormatError(f"unknown judges {sorted(judges - known)}")
    return MatcherConfig(
        split_length=float(_resolve(args, config, "split_length")),
        vicinity_radius=float(_resolve(args, config, "radius")),
        speed_decay=float(_resolve(args, config, "speed_decay")),
        collab_spatial_radius=float(_resolve(args, config, "collab_spatial")),
        collab_temporal_radius=float(_resolve(args, config, "collab_temporal")),
        neighbor_weight=float(_resolve(args, config, "neighbor_weight")),
        temporal_mode=str(_resolve(args, config, "temporal_mode")),
        update_interval=float(_resolve(args, config, "update_interval")),
        lookback=float(_resolve(args, config, "lookback")),
        decay_ratio=float(_resolve(args, config, "decay_ratio")),
        weights=weights,
        predictor=str(_resolve(args, config, "predictor")),
        use_kinematic="kinematic" in judges,
        use_habit="habit" in judges,
        use_traffic="traffic" in judges,
        k_floor=int(_resolve(args, config, "k_floor")),
        k_cap=int(_resolve(args, config, "k_cap")),
        trip_gap=float(_resolve(args, config, "trip_gap")),
    )


def _load_trajectories(probes_path: str, trip_gap: float) -> list[Trajectory]:
    by_vehicle = load_probes_csv(probes_path)
    out: list[Trajectory] = []
    for vehicle in sorted(by_vehicle):
        out.extend(t for t in split_trips(vehicle, by_vehicle[vehicle], trip_gap)
                   if len(t.probes) >= 2)
    return out


def _resolve_weights(args, config: dict) -> FusionWeights:
    if getattr(args, "equal_weights", False):
        return FusionWeights.equal()
    if getattr(args, "weights_file", None):
        return cal.read_weights_json(args.weights_file)
    if "weights" in config:
        w = config["weights"]
        try:
            return FusionWeights(float(w["wp"]), float(w["wc"]), float(w["wa"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputFormatError(f"bad weights in config: {exc}") from exc
    return FusionWeights.calibrated_default()


def _record_geojson(network, record) -> dict:
    """One LineString per inferred segment of a match record."""
    proj = network.projector
    features = []
    for i, seg in enumerate(record.paths):
        if not seg:
            continue
        coords = []
        for key in seg:
            edge = network.edge(key)
            if not coords:
                coords.append(list(proj.to_lonlat(edge.x0, edge.y0)))
            coords.append(list(proj.to_lonlat(edge.x1, edge.y1)))
        features.append({
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": coords},
            "properties": {"trajectory": record.trajectory_id, "segment": i},
        })
    return {"type": "FeatureCollection", "features": features}


# -- subcommands ---------------------------------------------------------------

def _cmd_match(args) -> int:
    config = _load_config(args.config)
    weights = _resolve_weights(args, config)
    mcfg = _build_matcher_config(args, config, weights)
    network = load_network_csv(args.nodes, args.links, mcfg.split_length)
    trajectories = _load_trajectories(args.probes, mcfg.trip_gap)
    if not trajectories:
        raise EmptyResultError("no trajectory with at least 2 probes in the input")

    history = HistoryStore(network)
    if args.history_log:
        if not args.history_probes:
            raise InputFormatError("--history-log requires --history-probes")
        warm = _load_trajectories(args.history_probes, mcfg.trip_gap)
        history.load_log(args.history_log, {t.id: t for t in warm}, prefix="warm:")

    model = None
    if mcfg.predictor == "spectral":
        if not args.model:
            raise InputFormatError("predictor 'spectral' requires --model")
        model = SpectralPredictor.load(args.model, network)

    session = MatchSession(network, mcfg, history=history, predictor_model=model)
    if args.debug_dir:
        session.debug_dir = args.debug_dir
    t_start = time.perf_counter()
    records = session.run(trajectories, jobs=int(_resolve(args, config, "jobs")))
    elapsed = time.perf_counter() - t_start
    write_match_csv(args.out, records)

    if args.states_out:
        write_states_csv(args.states_out, network, session.traffic.observed_states())
    if args.history_log_out:
        session.history.save_log(args.history_log_out)
    if args.geojson_dir:
        os.makedirs(args.geojson_dir, exist_ok=True)
        for rec in records:
            fc = _record_geojson(network, rec)
            with open(os.path.join(args.geojson_dir, f"{rec.trajectory_id}.geojson"),
                      "w", encoding="utf-8") as fh:
                json.dump(fc, fh)
    if args.report:
        matched = sum(1 for r in records for e in r.matched_edges if e is not None)
        total = sum(len(r.matched_edges) for r in records)
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump({
                "n_trajectories": len(records),
                "n_probes": total,
                "n_matched_probes": matched,
                "wall_seconds": round(elapsed, 6),
                "cost_s_per_trajectory": round(cost_index([elapsed], len(records)), 6),
            }, fh, indent=2)
    log.info("matched %d trajectories in %.2fs", len(records), elapsed)
    return 0


def _cmd_synth(args) -> int:
    network = make_grid_network(args.grid_cols, args.grid_rows, args.spacing,
                                split_length=args.split_length or 50.0)
    if args.speed_min > args.speed_max:
        raise InputFormatError("--speed-min must not exceed --speed-max")
    fleet = generate_synthetic(
        network, args.vehicles, args.habit, args.congestion, args.interval,
        args.noise, seed=args.seed, trips_per_vehicle=args.trips,
        speed_range=(args.speed_min, args.speed_max),
        min_route_duration=args.min_duration)
    if not fleet.trajectories:
        raise EmptyResultError("generator produced no trajectories")
    from .history import write_probes_csv
    rows = [(t.vehicle, p) for t in fleet.trajectories for p in t.probes]
    write_probes_csv(args.out, rows)
    if args.truth_out:
        write_match_csv(args.truth_out, fleet.truth_records())
    if args.nodes_out and args.links_out:
        save_network_csv(network, args.nodes_out, args.links_out)
    log.info("generated %d trajectories over %d links", len(fleet.trajectories),
             network.n_links())
    return 0


def _cmd_downsample(args) -> int:
    trajectories = _load_trajectories(args.probes, args.trip_gap or 900.0)
    if not trajectories:
        raise EmptyResultError("no trajectories to downsample")
    from .history import write_probes_csv
    kept = []
    for traj in trajectories:
        try:
            thin = cal.downsample(traj, args.interval)
        except ValueError as exc:
            raise InputFormatError(str(exc)) from exc
        if len(thin.probes) >= 2:
            kept.append(thin)
    if not kept:
        raise EmptyResultError("downsampling left no trajectory with 2+ probes")
    rows = [(t.vehicle, p) for t in kept for p in t.probes]
    write_probes_csv(args.out, rows)
    return 0


def _cmd_evaluate(args) -> int:
    pred = read_match_csv(args.pred)
    truth = read_match_csv(args.truth)
    if not truth:
        raise EmptyResultError("empty truth file")
    cost = None
    if args.cost_seconds is not None:
        n = args.n_trajectories or len({tid for tid, _ in pred})
        cost = cost_index([args.cost_seconds], n)
    report = evaluate_rows(pred, truth, cost=cost,
                           config_echo={"pred": args.pred, "truth": args.truth})
    print(report.to_json())
    return 0


def _cmd_train_predictor(args) -> int:
    network = load_network_csv(args.nodes, args.links, args.split_length or 50.0)
    states = read_states_csv(args.states, network)
    if len(states) < 3:
        raise EmptyResultError("not enough state intervals to train on")
    model = SpectralPredictor.for_network(network, args.max_steps, args.decay_ratio)
    try:
        result = train_spectral(model, [s.values for s in states],
                                max_epochs=args.epochs, learning_rate=args.lr,
                                batch_size=args.batch_size, seed=args.seed)
    except ValueError as exc:
        raise InputFormatError(str(exc)) from exc
    model.save(args.out)
    summary = {"epochs": result.epochs, "best_val_mse": result.best_val,
               "test_mse": result.test_mse}
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_calibrate(args) -> int:
    config = _load_config(args.config)
    weights = FusionWeights.equal()  # sampling runs with uninformed weights
    mcfg = _build_matcher_config(args, config, weights)
    network = load_network_csv(args.nodes, args.links, mcfg.split_length)
    trajectories = _load_trajectories(args.probes, mcfg.trip_gap)
    if not trajectories:
        raise EmptyResultError("no trajectories in the anchor data")
    intervals = [float(v) for v in args.intervals.split(",") if v]

    samples = []
    for interval in intervals:
        session = MatchSession(network, mcfg)
        for traj in sorted(trajectories, key=lambda t: (t.t0, t.id)):
            truth_paths = cal.ground_truth_paths(traj, network, radius=mcfg.vicinity_radius)
            truth_by_idx = {i: p for i, p in truth_paths}
            try:
                thin = cal.downsample(traj, interval)
            except ValueError as exc:
                raise InputFormatError(str(exc)) from exc
            if len(thin.probes) < 2:
                continue
            source_times = [p.t for p in traj.probes]
            idx_of = {round(t, 6): i for i, t in enumerate(source_times)}
            rec, collected = session.match_trajectory(thin, collect=True)
            for seg_end, outcome in collected:
                a = idx_of[round(thin.probes[seg_end - 1].t, 6)]
                b = idx_of[round(thin.probes[seg_end].t, 6)]
                truth_edges: set = set()
                complete = True
                for i in range(a + 1, b + 1):
                    p = truth_by_idx.get(i)
                    if p is None:
                        complete = False
                        break
                    truth_edges.update(p.edges)
                if not complete or not truth_edges:
                    continue
                for cand, sv in zip(outcome.candidates, outcome.candidate_scores):
                    y = cal.path_accuracy(cand.edges, tuple(truth_edges))
                    samples.append(cal.CalibrationSample(
                        sv.kinematic / 100.0, sv.habit / 100.0, sv.traffic / 100.0, y))
            session.history.record_match(rec)
            session.traffic.add_locations(rec.matched_locations())
    if args.samples_out:
        cal.write_samples_csv(args.samples_out, samples)
    if len(samples) < 30:
        raise EmptyResultError(f"only {len(samples)} calibration samples; need 30")
    fit = cal.fit_weights(samples, max_epochs=args.epochs, seed=args.seed)
    cal.write_weights_json(args.out, fit)
    print(json.dumps({
        "weights": {"wp": fit.weights.kinematic, "wc": fit.weights.habit,
                    "wa": fit.weights.traffic},
        "rounded": {"wp": fit.rounded.kinematic, "wc": fit.rounded.habit,
                    "wa": fit.rounded.traffic},
        "bias": fit.bias, "mse": fit.best_val, "n_samples": len(samples),
        "degenerate": fit.degenerate,
    }, indent=2))
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mapfuse",
        description="Map matching for low-frequency GNSS tracks with score fusion")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="match probe trajectories onto the network")
    p.add_argument("--nodes", required=True)
    p.add_argument("--links", required=True)
    p.add_argument("--probes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weights-file", dest="weights_file")
    p.add_argument("--equal-weights", dest="equal_weights", action="store_true")
    p.add_argument("--predictor", choices=["none", "naive", "spectral"])
    p.add_argument("--model", help="spectral predictor checkpoint (for --predictor spectral)")
    p.add_argument("--judges", help="comma list of kinematic,habit,traffic")
    p.add_argument("--history-log", dest="history_log")
    p.add_argument("--history-probes", dest="history_probes")
    p.add_argument("--history-log-out", dest="history_log_out")
    p.add_argument("--states-out", dest="states_out")
    p.add_argument("--report")
    p.add_argument("--geojson-dir", dest="geojson_dir")
    p.add_argument("--debug-dir", dest="debug_dir",
                   help="dump per-segment subgraph and candidate paths as GeoJSON")
    p.add_argument("--jobs", type=int)
    _add_pipeline_flags(p)
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("synth", help="generate a synthetic fleet on a grid network")
    p.add_argument("--out", required=True, help="probes CSV")
    p.add_argument("--truth-out", dest="truth_out")
    p.add_argument("--nodes-out", dest="nodes_out")
    p.add_argument("--links-out", dest="links_out")
    p.add_argument("--grid-cols", type=int, default=8)
    p.add_argument("--grid-rows", type=int, default=8)
    p.add_argument("--spacing", type=float, default=200.0)
    p.add_argument("--split-length", type=float, dest="split_length")
    p.add_argument("--vehicles", type=int, default=50)
    p.add_argument("--trips", type=int, default=2)
    p.add_argument("--habit", type=float, default=0.7)
    p.add_argument("--congestion", action="store_true")
    p.add_argument("--interval", type=float, default=15.0)
    p.add_argument("--noise", type=float, default=5.0)
    p.add_argument("--speed-min", type=float, dest="speed_min", default=2.5)
    p.add_argument("--speed-max", type=float, dest="speed_max", default=6.0)
    p.add_argument("--min-duration", type=float, dest="min_duration")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("downsample", help="thin probes to a coarser interval")
    p.add_argument("--probes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--interval", type=float, required=True)
    p.add_argument("--trip-gap", type=float, dest="trip_gap")
    p.set_defaults(func=_cmd_downsample)

    p = sub.add_parser("evaluate", help="score predictions against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--cost-seconds", type=float, dest="cost_seconds")
    p.add_argument("--n-trajectories", type=int, dest="n_trajectories")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("train-predictor", help="fit the spectral traffic predictor")
    p.add_argument("--nodes", required=True)
    p.add_argument("--links", required=True)
    p.add_argument("--states", required=True, help="state log CSV from match --states-out")
    p.add_argument("--out", required=True)
    p.add_argument("--split-length", type=float, dest="split_length")
    p.add_argument("--max-steps", type=int, dest="max_steps", default=12)
    p.add_argument("--decay-ratio", type=float, dest="decay_ratio", default=0.8)
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train_predictor)

    p = sub.add_parser("calibrate", help="fit fusion weights from high-frequency anchors")
    p.add_argument("--nodes", required=True)
    p.add_argument("--links", required=True)
    p.add_argument("--probes", required=True, help="high-frequency anchor probes")
    p.add_argument("--out", required=True, help="weights JSON")
    p.add_argument("--samples-out", dest="samples_out")
    p.add_argument("--intervals", default="30,60,120,180,240,300")
    p.add_argument("--predictor", choices=["none", "naive", "spectral"])
    p.add_argument("--judges")
    p.add_argument("--epochs", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    _add_pipeline_flags(p)
    p.set_defaults(func=_cmd_calibrate)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputFormatError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except EmptyResultError as exc:
        print(f"empty result: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

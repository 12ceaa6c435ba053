"""Per-trajectory matching pipeline and the session that feeds results back.

For each probe pair: candidate edges, reachability ellipse, subgraph trim,
top-K path search, three scores, fusion, selection. The selected end edge
becomes the only carried candidate of the next segment. Completed records
flow back into the history store and the traffic ledger at interval
boundaries, so a trajectory never sees its own in-flight results.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .history import CollaborationContext, HistoryStore, MatchRecord, Probe, Trajectory
from .network import EdgeKey, InputFormatError, RoadNetwork
from .path_search import (CandidateEdge, CandidatePath, build_subgraph, candidate_path_budget,
                          carried_candidate, ellipse_region, find_candidate_edges,
                          k_shortest_paths)
from .scoring import (FusionWeights, ScoreVector, final_score, habit_scores, kinematic_score,
                      mean_link_occupancy, select_path, traffic_scores)
from .traffic import SpectralPredictor, StateVector, TrafficConfig, aggregate_interval, \
    decay_weights, predict_naive


@dataclass(frozen=True)
class MatcherConfig:
    """Pipeline constants; defaults follow the deployed configuration."""

    split_length: float = 50.0
    vicinity_radius: float = 170.0
    speed_decay: float = 0.1
    collab_spatial_radius: float = 300.0
    collab_temporal_radius: float = 5.0
    neighbor_weight: float = 1.0
    temporal_mode: str = "time-of-day"
    update_interval: float = 300.0
    lookback: float = 3600.0
    decay_ratio: float = 0.8
    weights: FusionWeights = field(default_factory=FusionWeights.calibrated_default)
    predictor: str = "naive"            # none | naive | spectral
    use_kinematic: bool = True
    use_habit: bool = True
    use_traffic: bool = True
    k_floor: int = 6
    k_cap: int = 200
    trip_gap: float = 900.0

    def traffic_config(self) -> TrafficConfig:
        return TrafficConfig(self.update_interval, self.lookback, self.decay_ratio)


@dataclass
class SegmentOutcome:
    path: CandidatePath
    scores: ScoreVector
    final: float
    candidates: list[CandidatePath] | None = None
    candidate_scores: list[ScoreVector] | None = None


class TrafficLedger:
    """Matched locations bucketed per interval, with cached predictions.

    Interval j covers [(j-1)*interval, j*interval). States and predictions
    are frozen on first use, mirroring a predictor that publishes once per
    interval.
    """

    def __init__(self, network: RoadNetwork, config: TrafficConfig,
                 model: SpectralPredictor | None = None):
        self.network = network
        self.config = config
        self.model = model
        self._locations: dict[int, list[int]] = {}
        self._states: dict[int, StateVector] = {}
        self._predictions: dict[int, np.ndarray | None] = {}
        self._first_interval: int | None = None

    def interval_of(self, t: float) -> int:
        return math.floor(t / self.config.update_interval) + 1

    def add_locations(self, locations: Iterable[tuple[float, int]]) -> None:
        for t, link_id in locations:
            j = self.interval_of(t)
            self._locations.setdefault(j, []).append(link_id)
            if self._first_interval is None or j < self._first_interval:
                self._first_interval = j

    def state(self, interval: int) -> StateVector:
        cached = self._states.get(interval)
        if cached is None:
            cached = aggregate_interval(self.network, sorted(self._locations.get(interval, [])),
                                        interval)
            self._states[interval] = cached
        return cached

    def observed_states(self) -> list[StateVector]:
        if self._first_interval is None:
            return []
        last = max(self._locations)
        return [self.state(j) for j in range(self._first_interval, last + 1)]

    def predict_for(self, t: float) -> np.ndarray | None:
        """Predicted link shares for the interval containing t, or None cold."""
        j = self.interval_of(t)
        if j in self._predictions:
            return self._predictions[j]
        pred: np.ndarray | None = None
        if self._first_interval is not None and j > self._first_interval:
            steps = min(self.config.max_steps, j - self._first_interval)
            history = [self.state(j - 1 - k).values for k in range(steps)]
            if self.model is not None:
                pred = self.model.forward(history)
            else:
                pred = predict_naive(history, decay_weights(steps, self.config.decay_ratio))
        self._predictions[j] = pred
        return pred


class MatchSession:
    """Shared state for matching a batch of trajectories."""

    def __init__(self, network: RoadNetwork, config: MatcherConfig | None = None,
                 history: HistoryStore | None = None,
                 predictor_model: SpectralPredictor | None = None):
        self.network = network
        self.config = config or MatcherConfig()
        if self.config.predictor not in ("none", "naive", "spectral"):
            raise ValueError(f"unknown predictor {self.config.predictor!r}")
        if self.config.predictor == "spectral" and predictor_model is None:
            raise ValueError("spectral predictor requires a trained model checkpoint")
        self.history = history if history is not None else HistoryStore(network)
        model = predictor_model if self.config.predictor == "spectral" else None
        self.traffic = TrafficLedger(network, self.config.traffic_config(), model)
        self.debug_dir: str | None = None  # dump per-segment subgraph/path GeoJSON
        self._pending: list[MatchRecord] = []
        if history is not None:
            for record in history.records():
                self.traffic.add_locations(record.matched_locations())

    def seed_history(self, records: Iterable[MatchRecord]) -> None:
        """Ingest past results (e.g. from a log) before matching."""
        for record in sorted(records, key=lambda r: (r.t_end, r.trajectory_id)):
            self.history.record_match(record)
            self.traffic.add_locations(record.matched_locations())

    # -- pipeline stages -----------------------------------------------------

    def match_first_probe(self, probe: Probe) -> list[CandidateEdge]:
        """Full candidate set of a trip's first probe; may be empty."""
        x, y = self.network.projector.to_plane(probe.lon, probe.lat)
        return find_candidate_edges(x, y, probe.bearing, self.network,
                                    self.config.vicinity_radius)

    def match_segment(self, p_prev: Probe, p_cur: Probe,
                      carried: Sequence[CandidateEdge],
                      collab: CollaborationContext | None,
                      budget: int, *, collect: bool = False,
                      label: str = "") -> SegmentOutcome | None:
        """Infer the path between two probes, or None when nothing survives."""
        cfg = self.config
        dt = p_cur.t - p_prev.t
        end_cands = self.match_first_probe(p_cur)
        if not end_cands:
            return None
        prev_xy = self.network.projector.to_plane(p_prev.lon, p_prev.lat)
        cur_xy = self.network.projector.to_plane(p_cur.lon, p_cur.lat)
        region = ellipse_region(prev_xy, cur_xy, p_prev.speed, p_cur.speed, dt)
        sub = build_subgraph(self.network, region, carried, end_cands)
        paths = k_shortest_paths(sub, carried, end_cands, budget)
        if self.debug_dir and label:
            self._dump_debug(label, sub, paths)
        if not paths:
            return None

        kin = [kinematic_score(p, p_prev.speed, p_cur.speed, p_cur.bearing,
                               dt, cfg.speed_decay) for p in paths]
        if cfg.use_habit and collab is not None:
            habit = habit_scores([collab.path_frequency(p.edges) for p in paths])
        else:
            habit = [0.0] * len(paths)
        predicted = None
        if cfg.use_traffic and cfg.predictor != "none":
            predicted = self.traffic.predict_for(p_cur.t)
        if predicted is not None:
            occ = [mean_link_occupancy(p, predicted, self.network) for p in paths]
            traffic = traffic_scores(occ)
        else:
            traffic = [0.0] * len(paths)
        weights = cfg.weights.restrict(cfg.use_kinematic, cfg.use_habit,
                                       cfg.use_traffic and predicted is not None)
        vectors = [ScoreVector(k, h, a) for k, h, a in zip(kin, habit, traffic)]
        finals = [final_score(v, weights) for v in vectors]
        idx, best = select_path(list(zip(paths, finals)))
        outcome = SegmentOutcome(best, vectors[idx], finals[idx])
        if collect:
            outcome.candidates = paths
            outcome.candidate_scores = vectors
        return outcome

    def match_trajectory(self, trajectory: Trajectory, *,
                         collect: bool = False) -> MatchRecord | tuple[MatchRecord, list]:
        """Match every probe pair of a trajectory in time order.

        Unmatched gaps restart the candidate search at the next probe; the
        gap is reported, never interpolated.
        """
        if len(trajectory.probes) < 2:
            raise ValueError("trajectory needs at least 2 probes")
        cfg = self.config
        probes = trajectory.probes
        n = len(probes)
        collab = None
        if cfg.use_habit:
            collab = self.history.collaboration_context(
                trajectory, cfg.collab_spatial_radius, cfg.collab_temporal_radius,
                cfg.neighbor_weight, temporal_mode=cfg.temporal_mode)
        budget = candidate_path_budget(trajectory.probing_interval, cfg.k_floor, cfg.k_cap)

        matched: list[EdgeKey | None] = [None] * n
        paths: list[tuple[EdgeKey, ...] | None] = [None] * n
        collected: list[tuple[int, SegmentOutcome]] = []

        carried = self.match_first_probe(probes[0])
        anchor = 0 if carried else None
        for i in range(1, n):
            if not carried:
                carried = self.match_first_probe(probes[i])
                anchor = i if carried else None
                continue
            outcome = self.match_segment(probes[i - 1], probes[i], carried, collab,
                                         budget, collect=collect,
                                         label=f"{trajectory.id}_{i}")
            if outcome is None:
                carried = self.match_first_probe(probes[i])
                anchor = i if carried else None
                continue
            paths[i] = outcome.path.edges
            matched[i] = outcome.path.end_edge
            if anchor is not None and matched[anchor] is None:
                matched[anchor] = outcome.path.start.edge.key
            carried = [carried_candidate(self.network, outcome.path.end_edge,
                                         outcome.path.end.offset)]
            anchor = i
            if collect:
                collected.append((i, outcome))

        record = MatchRecord(
            trajectory_id=trajectory.id, vehicle=trajectory.vehicle,
            probe_times=tuple(p.t for p in probes),
            matched_edges=tuple(matched), paths=tuple(paths),
            start_lonlat=(probes[0].lon, probes[0].lat),
            end_lonlat=(probes[-1].lon, probes[-1].lat),
            t0=trajectory.t0, t_end=trajectory.t_end, completed_at=trajectory.t_end)
        if collect:
            return record, collected
        return record

    def _dump_debug(self, label: str, sub, paths) -> None:
        import json
        import os

        from .path_search import paths_geojson, subgraph_geojson
        os.makedirs(self.debug_dir, exist_ok=True)
        with open(os.path.join(self.debug_dir, f"{label}_subgraph.geojson"),
                  "w", encoding="utf-8") as fh:
            json.dump(subgraph_geojson(sub), fh)
        with open(os.path.join(self.debug_dir, f"{label}_paths.geojson"),
                  "w", encoding="utf-8") as fh:
            json.dump(paths_geojson(self.network, paths), fh)

    # -- batch driver ----------------------------------------------------------

    def _flush_pending(self) -> None:
        for record in self._pending:
            self.history.record_match(record)
            self.traffic.add_locations(record.matched_locations())
        self._pending.clear()

    def run(self, trajectories: Iterable[Trajectory], *, jobs: int = 1,
            feedback: bool = True) -> list[MatchRecord]:
        """Match trajectories in start-time order with interval barriers.

        Records complete within one update interval are applied together
        before the next interval's trajectories start, so results do not
        depend on intra-interval ordering and parallel workers see a stable
        snapshot.
        """
        ordered = sorted(trajectories, key=lambda tr: (tr.t0, tr.id))
        out: list[MatchRecord] = []
        interval = self.config.update_interval
        group: list[Trajectory] = []
        group_epoch: int | None = None

        def process_group(batch: list[Trajectory]) -> None:
            if not batch:
                return
            self._flush_pending()
            if jobs > 1:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    records = list(pool.map(self.match_trajectory, batch))
            else:
                records = [self.match_trajectory(t) for t in batch]
            out.extend(records)
            if feedback:
                self._pending.extend(records)

        for traj in ordered:
            epoch = math.floor(traj.t0 / interval)
            if group_epoch is None or epoch == group_epoch:
                group_epoch = epoch
                group.append(traj)
            else:
                process_group(group)
                group = [traj]
                group_epoch = epoch
        process_group(group)
        self._flush_pending()
        return out


# -- output files -------------------------------------------------------------

MATCH_COLUMNS = ("trajectory_id", "probe_idx", "timestamp", "link_id", "edge_idx",
                 "matched", "path_edges")


def write_match_csv(path: str, records: Sequence[MatchRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MATCH_COLUMNS)
        for rec in sorted(records, key=lambda r: r.trajectory_id):
            for i, t in enumerate(rec.probe_times):
                edge = rec.matched_edges[i]
                seg = rec.paths[i] or ()
                writer.writerow([
                    rec.trajectory_id, i, f"{t:.3f}",
                    edge[0] if edge else "", edge[1] if edge else "",
                    1 if edge else 0,
                    ";".join(f"{l}:{e}" for l, e in seg),
                ])


@dataclass(frozen=True)
class MatchRow:
    trajectory_id: str
    probe_idx: int
    timestamp: float
    edge: EdgeKey | None
    path: tuple[EdgeKey, ...] | None


def read_match_csv(path: str) -> dict[tuple[str, int], MatchRow]:
    rows: dict[tuple[str, int], MatchRow] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or \
                any(c not in reader.fieldnames for c in MATCH_COLUMNS):
            raise InputFormatError(f"{path}: expected columns {','.join(MATCH_COLUMNS)}")
        for rec in reader:
            try:
                edge = None
                if rec["matched"] == "1":
                    edge = (int(rec["link_id"]), int(rec["edge_idx"]))
                seg = None
                if rec["path_edges"]:
                    seg = tuple((int(l), int(e)) for l, e in
                                (item.split(":") for item in rec["path_edges"].split(";")))
                row = MatchRow(rec["trajectory_id"], int(rec["probe_idx"]),
                               float(rec["timestamp"]), edge, seg)
            except (TypeError, ValueError) as exc:
                raise InputFormatError(f"{path}: bad row {rec}") from exc
            rows[(row.trajectory_id, row.probe_idx)] = row
    return rows

import math

import pytest

from mapfuse.history import (DAY_SECONDS, HistoryStore, MatchRecord, Probe, Trajectory,
                             load_probes_csv, split_trips, time_of_day_delta,
                             write_probes_csv)


def _lonlat(net, x, y):
    return net.projector.to_lonlat(x, y)


def _record(net, tid, vehicle, path_edges, *, t0=1000.0, t_end=1060.0,
            start_xy=(10.0, 0.0), end_xy=(390.0, 0.0)):
    """Two-probe record whose single segment passes ``path_edges``."""
    return MatchRecord(
        trajectory_id=tid, vehicle=vehicle, probe_times=(t0, t_end),
        matched_edges=(path_edges[0], path_edges[-1]),
        paths=(None, tuple(path_edges)),
        start_lonlat=_lonlat(net, *start_xy), end_lonlat=_lonlat(net, *end_xy),
        t0=t0, t_end=t_end, completed_at=t_end)


def _trajectory(net, tid, vehicle, *, t0=2000.0, t_end=2060.0,
                start_xy=(10.0, 0.0), end_xy=(390.0, 0.0)):
    lon0, lat0 = _lonlat(net, *start_xy)
    lon1, lat1 = _lonlat(net, *end_xy)
    return Trajectory(tid, vehicle, (
        Probe(t=t0, speed=5.0, bearing=0.0, lon=lon0, lat=lat0),
        Probe(t=t_end, speed=5.0, bearing=0.0, lon=lon1, lat=lat1),
    ))


class TestRecordMatch:
    def test_recording_twice_counts_each_traversal(self, chain_network):
        store = HistoryStore(chain_network)
        path = ((0, 1), (0, 2), (0, 3))
        store.record_match(_record(chain_network, "a-0", "a", path))
        store.record_match(_record(chain_network, "a-1", "a", path, t0=5000.0, t_end=5060.0))
        counts = store.vehicle_counts("a", before_t=10_000.0)
        assert all(counts[e] == 2 for e in path)

    def test_duplicate_id_rejected(self, chain_network):
        store = HistoryStore(chain_network)
        rec = _record(chain_network, "a-0", "a", ((0, 1), (0, 2)))
        store.record_match(rec)
        with pytest.raises(ValueError):
            store.record_match(rec)

    def test_disconnected_path_rejected(self, chain_network):
        store = HistoryStore(chain_network)
        with pytest.raises(ValueError):
            store.record_match(_record(chain_network, "a-0", "a", ((0, 1), (0, 3))))

    def test_end_edge_mismatch_rejected(self, chain_network):
        rec = MatchRecord(
            trajectory_id="a-0", vehicle="a", probe_times=(0.0, 60.0),
            matched_edges=((0, 1), (0, 4)), paths=(None, ((0, 1), (0, 2))),
            start_lonlat=_lonlat(chain_network, 10.0, 0.0),
            end_lonlat=_lonlat(chain_network, 90.0, 0.0),
            t0=0.0, t_end=60.0)
        with pytest.raises(ValueError):
            HistoryStore(chain_network).record_match(rec)


class TestCollaborativeGroup:
    def test_empty_store(self, chain_network):
        store = HistoryStore(chain_network)
        traj = _trajectory(chain_network, "j", "ego")
        assert store.collaborative_group(traj, 300.0, 5.0) == set()

    def test_clones_in_neighbors_out(self, chain_network):
        store = HistoryStore(chain_network)
        # clones shifted 100 m / 2 s; a third shifted 400 m spatially
        base = dict(t0=1000.0, t_end=1060.0)
        store.record_match(_record(chain_network, "n1-0", "n1",
                                   ((0, 1), (0, 2)), **base))
        store.record_match(_record(chain_network, "n2-0", "n2", ((0, 1), (0, 2)),
                                   t0=1002.0, t_end=1062.0,
                                   start_xy=(110.0, 0.0), end_xy=(490.0, 0.0)))
        store.record_match(_record(chain_network, "n3-0", "n3", ((0, 1), (0, 2)),
                                   t0=1000.0, t_end=1060.0,
                                   start_xy=(410.0, 0.0), end_xy=(790.0, 0.0)))
        traj = _trajectory(chain_network, "j", "ego",
                           t0=1000.0 + DAY_SECONDS, t_end=1060.0 + DAY_SECONDS)
        group = store.collaborative_group(traj, 300.0, 5.0)
        assert group == {"n1-0", "n2-0"}

    def test_absolute_mode_ignores_day_wrap(self, chain_network):
        store = HistoryStore(chain_network)
        store.record_match(_record(chain_network, "n1-0", "n1", ((0, 1), (0, 2))))
        traj = _trajectory(chain_network, "j", "ego",
                           t0=1000.0 + DAY_SECONDS, t_end=1060.0 + DAY_SECONDS)
        assert store.collaborative_group(traj, 300.0, 5.0, temporal_mode="absolute") == set()
        assert store.collaborative_group(traj, 300.0, 5.0) == {"n1-0"}

    def test_unfinished_needs_streaming(self, chain_network):
        store = HistoryStore(chain_network)
        traj = Trajectory("j", "ego", _trajectory(chain_network, "j", "ego").probes,
                          finished=False)
        with pytest.raises(ValueError):
            store.collaborative_group(traj, 300.0, 5.0)
        store.collaborative_group(traj, 300.0, 5.0, streaming=True)

    def test_only_records_before_trip_start_qualify(self, chain_network):
        store = HistoryStore(chain_network)
        store.record_match(_record(chain_network, "n1-0", "n1", ((0, 1), (0, 2)),
                                   t0=3000.0, t_end=3060.0))
        traj = _trajectory(chain_network, "j", "ego", t0=3030.0, t_end=3090.0)
        assert store.collaborative_group(traj, 300.0, 5.0) == set()

    def test_insertion_order_insensitive(self, chain_network):
        records = [
            _record(chain_network, f"n{i}-0", f"n{i}", ((0, 1), (0, 2)),
                    t0=1000.0 + i, t_end=1060.0 + i)
            for i in range(4)
        ]
        traj = _trajectory(chain_network, "j", "ego",
                           t0=1001.0 + DAY_SECONDS, t_end=1061.0 + DAY_SECONDS)
        groups = []
        for ordering in (records, records[::-1]):
            store = HistoryStore(chain_network)
            for rec in ordering:
                store.record_match(rec)
            groups.append(store.collaborative_group(traj, 300.0, 5.0))
        assert groups[0] == groups[1]


class TestUsageFrequency:
    def test_one_neighbor_folds_in_at_full_weight(self, chain_network):
        store = HistoryStore(chain_network)
        path = ((0, 1), (0, 2))
        store.record_match(_record(chain_network, "ego-0", "ego", path))
        store.record_match(_record(chain_network, "ego-1", "ego", path,
                                   t0=1100.0, t_end=1160.0))
        store.record_match(_record(chain_network, "nb-0", "nb", path,
                                   t0=1200.0, t_end=1260.0))
        freq = store.usage_frequency("ego", {"nb-0"}, path, 1.0, before_t=10_000.0)
        # ego aggregate [2, 2] plus neighbor [1, 1] over two members and two edges
        assert freq == pytest.approx((2 + 2 + 1 + 1) / (2 * 2))

    def test_mean_usage_with_unbalanced_neighbor(self):
        # ego aggregate [2, 2] on a 2-edge path; one neighbor [4, 0] via laps
        from conftest import build_network
        nodes = [(0, 0.0, 0.0), (1, 200.0, 0.0), (2, 200.0, 200.0), (3, 0.0, 200.0),
                 (4, 400.0, 0.0)]
        links = [(0, 0, 1, 200.0, None), (1, 1, 2, 200.0, None), (2, 2, 3, 200.0, None),
                 (3, 3, 0, 200.0, None), (4, 1, 4, 200.0, None)]
        net = build_network(nodes, links, split_length=200.0)
        store = HistoryStore(net)
        path = ((0, 1), (4, 1))
        for k in range(2):
            store.record_match(_record(net, f"ego-{k}", "ego", path,
                                       t0=1000.0 + k * 100, t_end=1060.0 + k * 100,
                                       start_xy=(10.0, 0.0), end_xy=(390.0, 0.0)))
        lap = ((0, 1), (1, 1), (2, 1), (3, 1))
        nb = MatchRecord(
            trajectory_id="nb-0", vehicle="nb", probe_times=(2000.0, 2400.0),
            matched_edges=((0, 1), (3, 1)), paths=(None, lap * 4),
            start_lonlat=_lonlat(net, 10.0, 0.0), end_lonlat=_lonlat(net, 0.0, 100.0),
            t0=2000.0, t_end=2400.0)
        store.record_match(nb)
        freq = store.usage_frequency("ego", {"nb-0"}, path, 1.0, before_t=10_000.0)
        assert freq == pytest.approx(2.0)  # (2+2 + 4+0) / (2 members * 2 edges)

    def test_boundary_edges_counted_once_per_pass(self, chain_network):
        # consecutive segments share their boundary edge; one traversal, one count
        store = HistoryStore(chain_network)
        rec = MatchRecord(
            trajectory_id="a-0", vehicle="a", probe_times=(0.0, 30.0, 60.0),
            matched_edges=((0, 1), (0, 2), (0, 4)),
            paths=(None, ((0, 1), (0, 2)), ((0, 2), (0, 3), (0, 4))),
            start_lonlat=_lonlat(chain_network, 10.0, 0.0),
            end_lonlat=_lonlat(chain_network, 190.0, 0.0),
            t0=0.0, t_end=60.0)
        store.record_match(rec)
        counts = store.trip_counts("a-0")
        assert counts[(0, 2)] == 1
        assert counts[(0, 1)] == 1 and counts[(0, 3)] == 1 and counts[(0, 4)] == 1

    def test_zero_neighbor_weight_is_ego_mean(self, chain_network):
        store = HistoryStore(chain_network)
        path = ((0, 1), (0, 2), (0, 3))
        store.record_match(_record(chain_network, "ego-0", "ego", path))
        store.record_match(_record(chain_network, "nb-0", "nb", path,
                                   t0=1100.0, t_end=1160.0))
        freq = store.usage_frequency("ego", {"nb-0"}, path, 0.0, before_t=10_000.0)
        assert freq == pytest.approx(1.0)

    def test_no_history_is_zero(self, chain_network):
        store = HistoryStore(chain_network)
        assert store.usage_frequency("ego", set(), ((0, 1),), 1.0, before_t=1.0) == 0.0

    def test_empty_path_rejected(self, chain_network):
        store = HistoryStore(chain_network)
        with pytest.raises(ValueError):
            store.usage_frequency("ego", set(), (), 1.0, before_t=1.0)

    def test_monotone_in_any_edge_count(self, chain_network):
        store = HistoryStore(chain_network)
        path = ((0, 1), (0, 2))
        store.record_match(_record(chain_network, "ego-0", "ego", path))
        before = store.usage_frequency("ego", set(), path, 1.0, before_t=10_000.0)
        store.record_match(_record(chain_network, "ego-1", "ego", ((0, 1),),
                                   t0=1100.0, t_end=1160.0,
                                   end_xy=(30.0, 0.0)))
        after = store.usage_frequency("ego", set(), path, 1.0, before_t=10_000.0)
        assert after >= before

    def test_identical_members_match_ego_only_value(self, chain_network):
        # all group members carrying the ego's exact counts leave the mean unchanged
        store = HistoryStore(chain_network)
        path = ((0, 1), (0, 2))
        store.record_match(_record(chain_network, "ego-0", "ego", path))
        for k in range(3):
            store.record_match(_record(chain_network, f"n{k}-0", f"n{k}", path,
                                       t0=1100.0 + k, t_end=1160.0 + k))
        ego_only = store.usage_frequency("ego", set(), path, 1.0, before_t=10_000.0)
        group = store.usage_frequency("ego", {"n0-0", "n1-0", "n2-0"}, path, 1.0,
                                      before_t=10_000.0)
        assert group == pytest.approx(ego_only)

    def test_context_matches_direct_computation(self, chain_network):
        store = HistoryStore(chain_network)
        path = ((0, 1), (0, 2))
        store.record_match(_record(chain_network, "ego-0", "ego", path))
        store.record_match(_record(chain_network, "nb-0", "nb", ((0, 2), (0, 3)),
                                   t0=1100.0, t_end=1160.0))
        traj = _trajectory(chain_network, "j", "ego",
                           t0=1100.0 + DAY_SECONDS, t_end=1160.0 + DAY_SECONDS)
        ctx = store.collaboration_context(traj, 300.0, 5.0, 1.0)
        direct = store.usage_frequency("ego", ctx.group, path, 1.0, before_t=traj.t0)
        assert ctx.path_frequency(path) == pytest.approx(direct)


def test_time_of_day_delta():
    assert time_of_day_delta(10.0, DAY_SECONDS + 12.0) == pytest.approx(2.0)
    assert time_of_day_delta(10.0, DAY_SECONDS - 10.0) == pytest.approx(20.0)


def test_trajectory_median_interval():
    probes = tuple(Probe(t=float(t), speed=1.0, bearing=0.0, lon=0.0, lat=0.0)
                   for t in (0, 30, 60, 95, 125))
    traj = Trajectory("x-0", "x", probes)
    assert traj.probing_interval == 30.0


def test_log_round_trip(tmp_path, chain_network):
    store = HistoryStore(chain_network)
    rec = _record(chain_network, "a-0", "a", ((0, 1), (0, 2)))
    store.record_match(rec)
    log_path = tmp_path / "history.log"
    store.save_log(str(log_path))
    text = log_path.read_text().splitlines()
    assert text[0] == "a-0|0|0:1|"
    assert text[1] == "a-0|1|0:2|0:1;0:2"

    traj = _trajectory(chain_network, "a-0", "a", t0=rec.t0, t_end=rec.t_end)
    again = HistoryStore(chain_network)
    assert again.load_log(str(log_path), {"a-0": traj}) == 1
    assert again.trip_counts("a-0") == store.trip_counts("a-0")


def test_probe_csv_round_trip(tmp_path, chain_network):
    traj = _trajectory(chain_network, "a-0", "a")
    path = tmp_path / "probes.csv"
    write_probes_csv(str(path), [("a", p) for p in traj.probes])
    loaded = load_probes_csv(str(path))
    assert list(loaded) == ["a"]
    assert len(loaded["a"]) == 2
    assert loaded["a"][0].t == traj.probes[0].t


def test_split_trips_on_gaps():
    probes = [Probe(t=float(t), speed=1.0, bearing=0.0, lon=0.0, lat=0.0)
              for t in (0, 30, 60, 2000, 2030)]
    trips = split_trips("v", probes, gap=900.0)
    assert [t.id for t in trips] == ["v-0", "v-1"]
    assert len(trips[0].probes) == 3
    assert len(trips[1].probes) == 2


def test_probe_validation():
    with pytest.raises(ValueError):
        Probe(t=0.0, speed=80.0, bearing=0.0, lon=0.0, lat=0.0)
    with pytest.raises(ValueError):
        Probe(t=0.0, speed=1.0, bearing=0.0, lon=math.nan, lat=0.0)

"""Candidate projection edges, reachability ellipse, and top-K path search.

Between two probes the search runs on the intersection-node graph: links are
arcs, and partial traversals of the anchor links enter through virtual
source/sink connectors weighted by the projection offsets. Subdivision nodes
never branch, so this is exactly equivalent to searching edge by edge while
being several times smaller.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from heapq import heappop, heappush
from typing import Iterable, Sequence

from .geometry import bearing_inclination
from .network import Edge, EdgeKey, RoadNetwork

_SRC = "SRC"
_SNK = "SNK"

# Paths whose lengths differ by less than this are treated as exact ties
# when deciding how far past K the enumeration must look.
_TIE_EPS = 1e-6
# How many paths beyond K may be enumerated to resolve a boundary tie class.
_TIE_OVERRUN = 64


@dataclass(frozen=True)
class CandidateEdge:
    """An edge a probe may project onto."""

    edge: Edge
    x: float            # projection point (planar)
    y: float
    offset: float       # nominal meters from the edge start
    distance: float     # perpendicular distance probe -> projection

    @property
    def link_offset(self) -> float:
        """Offset of the projection from the link start."""
        return self.edge.start_offset + self.offset


def carried_candidate(network: RoadNetwork, key: EdgeKey, offset: float) -> CandidateEdge:
    """Candidate for an already-inferred edge (cursor carried forward)."""
    edge = network.edge(key)
    offset = min(max(offset, 0.0), edge.length)
    f = offset / edge.length if edge.length > 0 else 0.0
    return CandidateEdge(edge, edge.x0 + f * (edge.x1 - edge.x0),
                         edge.y0 + f * (edge.y1 - edge.y0), offset, 0.0)


def find_candidate_edges(x: float, y: float, bearing: float,
                         network: RoadNetwork, radius: float) -> list[CandidateEdge]:
    """Edges the probe at (x, y) may legally project onto.

    Per link the probe projects a single point: the perpendicular foot on
    the link. Links whose foot falls beyond their extent have no projection
    point and are never candidates; without this, every probe approaching an
    intersection also "projects" onto the links leaving it, which are pure
    phantoms. The containing edge is a candidate when the foot is within the
    vicinity radius, the probe bearing deviates from the link direction by
    less than 90 degrees, and at least one of the edge's side nodes is
    itself within the radius.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    best_per_link: dict[int, CandidateEdge] = {}
    for edge in network.edges_near(x, y, radius):
        proj, offset = network.project_point_to_edge(x, y, edge)
        cand = CandidateEdge(edge, proj.x, proj.y, offset, proj.distance)
        cur = best_per_link.get(edge.link_id)
        if cur is None or (cand.distance, cand.edge.index) < (cur.distance, cur.edge.index):
            best_per_link[edge.link_id] = cand
    out = []
    for link_id in sorted(best_per_link):
        cand = best_per_link[link_id]
        if cand.distance > radius:
            continue
        link = network.link(link_id)
        ldx = link.x1 - link.x0
        ldy = link.y1 - link.y0
        norm2 = ldx * ldx + ldy * ldy
        if norm2 > 0.0:
            t = ((x - link.x0) * ldx + (y - link.y0) * ldy) / norm2
            if t < 0.0 or t > 1.0:
                continue  # foot beyond the link: no projection point
        if bearing_inclination(bearing, link.bearing) >= 90.0:
            continue
        edge = cand.edge
        near_from = math.hypot(edge.x0 - x, edge.y0 - y) <= radius
        near_to = math.hypot(edge.x1 - x, edge.y1 - y) <= radius
        if not (near_from or near_to):
            continue
        out.append(cand)
    out.sort(key=lambda c: (c.distance, c.edge.link_id))
    return out


def candidates_for_probe(probe, network: RoadNetwork, radius: float) -> list[CandidateEdge]:
    """`find_candidate_edges` for a lon/lat probe."""
    x, y = network.projector.to_plane(probe.lon, probe.lat)
    return find_candidate_edges(x, y, probe.bearing, network, radius)


@dataclass(frozen=True)
class EllipseRegion:
    """Reachable region between two probes: foci plus long-axis length."""

    fx0: float
    fy0: float
    fx1: float
    fy1: float
    long_axis: float

    def contains(self, x: float, y: float) -> bool:
        return (math.hypot(x - self.fx0, y - self.fy0)
                + math.hypot(x - self.fx1, y - self.fy1)) <= self.long_axis

    def bbox(self) -> tuple[float, float, float, float]:
        half = self.long_axis / 2.0
        cx = (self.fx0 + self.fx1) / 2.0
        cy = (self.fy0 + self.fy1) / 2.0
        return cx - half, cy - half, cx + half, cy + half


def ellipse_region(p_prev: tuple[float, float], p_cur: tuple[float, float],
                   v_prev: float, v_cur: float, dt: float) -> EllipseRegion:
    """Reachability ellipse with the probes as foci.

    Long axis is the larger of the max-speed travel budget and twice the
    focal distance; the floor keeps the region non-degenerate when the
    probes are far apart relative to their speeds.
    """
    if dt <= 0:
        raise ValueError("probe gap must be positive")
    focal = math.hypot(p_cur[0] - p_prev[0], p_cur[1] - p_prev[1])
    axis = max(max(v_prev, v_cur) * dt, 2.0 * focal)
    return EllipseRegion(p_prev[0], p_prev[1], p_cur[0], p_cur[1], axis)


@dataclass(frozen=True)
class SubGraph:
    """Edges of the network usable between two probes."""

    network: RoadNetwork
    edge_keys: frozenset[EdgeKey]
    usable_links: frozenset[int]

    @classmethod
    def whole(cls, network: RoadNetwork) -> "SubGraph":
        keys = frozenset(e.key for e in network.iter_edges())
        return cls(network, keys, frozenset(network.link_ids))

    def segment_usable(self, link_id: int, first_index: int, last_index: int) -> bool:
        return all((link_id, i) in self.edge_keys for i in range(first_index, last_index + 1))


def build_subgraph(network: RoadNetwork, region: EllipseRegion,
                   start_candidates: Sequence[CandidateEdge],
                   end_candidates: Sequence[CandidateEdge]) -> SubGraph:
    """Trim the network to the reachability region.

    An edge stays when both side nodes are inside, or when one side node
    belongs to a candidate edge and that node is inside. A link is usable
    end to end only when all of its edges stay.
    """
    candidate_points = set()
    for cand in list(start_candidates) + list(end_candidates):
        candidate_points.add(cand.edge.from_point)
        candidate_points.add(cand.edge.to_point)
    kept: set[EdgeKey] = set()
    xmin, ymin, xmax, ymax = region.bbox()
    for edge in network.edges_in_bbox(xmin, ymin, xmax, ymax):
        in_from = region.contains(edge.x0, edge.y0)
        in_to = region.contains(edge.x1, edge.y1)
        if in_from and in_to:
            kept.add(edge.key)
        elif (in_from and edge.from_point in candidate_points) or \
             (in_to and edge.to_point in candidate_points):
            kept.add(edge.key)
    usable = set()
    for lid in network.link_ids:
        link = network.link(lid)
        if all(e.key in kept for e in link.edges):
            usable.add(lid)
    return SubGraph(network, frozenset(kept), frozenset(usable))


@dataclass(frozen=True)
class CandidatePath:
    """A loopless directed path between two projection points."""

    start: CandidateEdge
    end: CandidateEdge
    link_ids: tuple[int, ...]       # every link passed, in order
    edges: tuple[EdgeKey, ...]      # every edge passed, in order
    length: float                   # traveled meters, projection to projection

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_links(self) -> int:
        return len(self.link_ids)

    @property
    def sort_key(self) -> tuple[float, int, tuple[EdgeKey, ...]]:
        return (self.length, self.n_links, self.edges)

    @property
    def end_edge(self) -> EdgeKey:
        return self.end.edge.key

    @property
    def interior_links(self) -> tuple[int, ...]:
        return self.link_ids[1:-1]


def candidate_path_budget(probe_interval: float, floor: int = 6, cap: int = 200) -> int:
    """How many candidate paths to search for a given probing interval."""
    k = int(round(max(0.3 * probe_interval - 18.0, float(floor))))
    return max(floor, min(k, cap))


# -- search graph ------------------------------------------------------------

class _SearchGraph:
    """Node-level graph with virtual per-candidate connectors."""

    def __init__(self, subgraph: SubGraph,
                 start_candidates: Sequence[CandidateEdge],
                 end_candidates: Sequence[CandidateEdge]):
        net = subgraph.network
        self.network = net
        self.subgraph = subgraph
        self.start_candidates = list(start_candidates)
        self.end_candidates = list(end_candidates)
        self.arc_dst: list[object] = []
        self.arc_weight: list[float] = []
        self.arc_kind: list[str] = []      # "link" | "start" | "end" | "hop"
        self.arc_payload: list[object] = []
        self.arc_links: list[int] = []     # link-count increment
        self.adj: dict[object, list[int]] = {}

        for lid in sorted(subgraph.usable_links):
            link = net.link(lid)
            self._add_arc(link.from_node, link.to_node, link.length, "link", lid, 1)
        for i, cand in enumerate(self.start_candidates):
            link = net.link(cand.edge.link_id)
            if not subgraph.segment_usable(link.id, cand.edge.index, len(link.edges)):
                continue
            remaining = link.length - cand.link_offset
            node = ("s", i)
            self._add_arc(_SRC, node, remaining, "start", i, 1)
            self._add_arc(node, link.to_node, 0.0, "hop", None, 0)
        for j, cand in enumerate(self.end_candidates):
            link = net.link(cand.edge.link_id)
            if not subgraph.segment_usable(link.id, 1, cand.edge.index):
                continue
            node = ("e", j)
            self._add_arc(link.from_node, node, cand.link_offset, "end", j, 1)
            self._add_arc(node, _SNK, 0.0, "hop", None, 0)

    def _add_arc(self, src, dst, weight, kind, payload, links) -> None:
        arc = len(self.arc_dst)
        self.arc_dst.append(dst)
        self.arc_weight.append(weight)
        self.arc_kind.append(kind)
        self.arc_payload.append(payload)
        self.arc_links.append(links)
        self.adj.setdefault(src, []).append(arc)

    def dijkstra(self, source, removed_arcs: set[int], removed_nodes: set) -> tuple[float, list[int]] | None:
        """Cheapest arc path from ``source`` to the sink, or None."""
        heap: list[tuple[float, int, object]] = [(0.0, 0, source)]
        parent: dict[object, tuple[object, int]] = {}
        dist = {source: 0.0}
        done = set()
        counter = 1
        adj = self.adj
        arc_dst = self.arc_dst
        arc_weight = self.arc_weight
        while heap:
            d, _, node = heappop(heap)
            if node in done:
                continue
            if node == _SNK:
                arcs: list[int] = []
                cur = node
                while cur != source:
                    prev, arc = parent[cur]
                    arcs.append(arc)
                    cur = prev
                arcs.reverse()
                return d, arcs
            done.add(node)
            for arc in adj.get(node, ()):
                if arc in removed_arcs:
                    continue
                dst = arc_dst[arc]
                if dst in removed_nodes or dst in done:
                    continue
                nd = d + arc_weight[arc]
                if nd < dist.get(dst, math.inf):
                    dist[dst] = nd
                    parent[dst] = (node, arc)
                    heappush(heap, (nd, counter, dst))
                    counter += 1
        return None

    def node_sequence(self, arcs: Sequence[int]) -> list[object]:
        nodes = [_SRC]
        for arc in arcs:
            nodes.append(self.arc_dst[arc])
        return nodes

    def to_candidate_path(self, arcs: Sequence[int]) -> CandidatePath:
        net = self.network
        start = end = None
        link_ids: list[int] = []
        edges: list[EdgeKey] = []
        for arc in arcs:
            kind = self.arc_kind[arc]
            if kind == "hop":
                continue
            if kind == "start":
                start = self.start_candidates[self.arc_payload[arc]]
                link = net.link(start.edge.link_id)
                link_ids.append(link.id)
                edges.extend(e.key for e in link.edges[start.edge.index - 1:])
            elif kind == "link":
                link = net.link(self.arc_payload[arc])
                link_ids.append(link.id)
                edges.extend(e.key for e in link.edges)
            else:  # end
                end = self.end_candidates[self.arc_payload[arc]]
                link = net.link(end.edge.link_id)
                link_ids.append(link.id)
                edges.extend(e.key for e in link.edges[:end.edge.index])
        assert start is not None and end is not None
        length = math.fsum(self.arc_weight[a] for a in arcs)
        return CandidatePath(start, end, tuple(link_ids), tuple(edges), length)


def _trivial_paths(start_candidates: Sequence[CandidateEdge],
                   end_candidates: Sequence[CandidateEdge],
                   network: RoadNetwork) -> list[CandidatePath]:
    """Forward partial traversals of a single link (no intersection crossed).

    These cannot be expressed on the node graph and cover the common case of
    consecutive probes on the same link, including a stopped vehicle.
    """
    out = []
    for sc in start_candidates:
        for ec in end_candidates:
            if sc.edge.link_id != ec.edge.link_id:
                continue
            if ec.link_offset < sc.link_offset:
                continue
            link = network.link(sc.edge.link_id)
            edges = tuple(e.key for e in link.edges[sc.edge.index - 1:ec.edge.index])
            out.append(CandidatePath(sc, ec, (link.id,), edges,
                                     ec.link_offset - sc.link_offset))
    return out


def _yen(graph: _SearchGraph, budget: int) -> list[tuple[float, tuple[int, ...]]]:
    """Loopless shortest arc paths from source to sink, cheapest first.

    Enumerates up to ``budget`` paths plus whatever is needed to finish the
    tie class at the boundary, within a fixed overrun.
    """
    first = graph.dijkstra(_SRC, set(), set())
    if first is None:
        return []
    selected: list[tuple[float, tuple[int, ...], int]] = [(first[0], tuple(first[1]), 0)]
    pool: list[tuple[float, int, tuple[int, ...], int]] = []
    seen = {tuple(first[1])}
    counter = 0

    while True:
        cost_p, arcs_p, dev_index = selected[-1]
        node_seq = graph.node_sequence(arcs_p)
        prefix_cost = 0.0
        for i in range(len(arcs_p) - 1):
            if i > 0:
                prefix_cost += graph.arc_weight[arcs_p[i - 1]]
            if i < dev_index:
                continue  # Lawler: deviations before the parent's own spur are covered
            root = arcs_p[:i]
            spur_node = node_seq[i]
            removed_arcs = set()
            for _, arcs_q, _ in selected:
                if arcs_q[:i] == root:
                    removed_arcs.add(arcs_q[i])
            removed_nodes = set(node_seq[:i])
            alternatives = [a for a in graph.adj.get(spur_node, ())
                            if a not in removed_arcs and graph.arc_dst[a] not in removed_nodes]
            if not alternatives:
                continue
            spur = graph.dijkstra(spur_node, removed_arcs, removed_nodes)
            if spur is None:
                continue
            total = tuple(root) + tuple(spur[1])
            if total in seen:
                continue
            seen.add(total)
            counter += 1
            heappush(pool, (prefix_cost + spur[0], counter, total, i))
        if not pool:
            break
        if len(selected) >= budget:
            kth = sorted(c for c, _, _ in selected)[budget - 1]
            if pool[0][0] > kth + _TIE_EPS or len(selected) >= budget + _TIE_OVERRUN:
                break
        cost, _, arcs, dev_index = heappop(pool)
        selected.append((cost, arcs, dev_index))
    return [(c, a) for c, a, _ in selected]


def k_shortest_paths(subgraph: SubGraph,
                     start_candidates: Sequence[CandidateEdge],
                     end_candidates: Sequence[CandidateEdge],
                     budget: int) -> list[CandidatePath]:
    """Up to ``budget`` loopless candidate paths, shortest first.

    Paths run from any start projection to any end projection. Ordering is
    by traveled length, then link count, then lexicographic edge ids; the
    result never contains two paths with the same edge sequence.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    paths = _trivial_paths(start_candidates, end_candidates, subgraph.network)
    graph = _SearchGraph(subgraph, start_candidates, end_candidates)
    for _, arcs in _yen(graph, budget):
        paths.append(graph.to_candidate_path(arcs))
    unique: dict[tuple[EdgeKey, ...], CandidatePath] = {}
    for path in paths:
        prev = unique.get(path.edges)
        if prev is None or path.sort_key < prev.sort_key:
            unique[path.edges] = path
    ranked = sorted(unique.values(), key=lambda p: p.sort_key)
    return ranked[:budget]


# -- debug dumps ---------------------------------------------------------------

def subgraph_geojson(subgraph: SubGraph) -> dict:
    features = []
    proj = subgraph.network.projector
    for key in sorted(subgraph.edge_keys):
        edge = subgraph.network.edge(key)
        coords = [list(proj.to_lonlat(edge.x0, edge.y0)), list(proj.to_lonlat(edge.x1, edge.y1))]
        features.append({
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": coords},
            "properties": {"link": key[0], "edge": key[1]},
        })
    return {"type": "FeatureCollection", "features": features}


def paths_geojson(network: RoadNetwork, paths: Iterable[CandidatePath]) -> dict:
    features = []
    proj = network.projector
    for rank, path in enumerate(paths):
        coords = []
        for key in path.edges:
            edge = network.edge(key)
            if not coords:
                coords.append(list(proj.to_lonlat(edge.x0, edge.y0)))
            coords.append(list(proj.to_lonlat(edge.x1, edge.y1)))
        features.append({
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": coords},
            "properties": {"rank": rank, "length_m": round(path.length, 3),
                           "links": len(path.link_ids)},
        })
    return {"type": "FeatureCollection", "features": features}

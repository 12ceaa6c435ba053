import math

import pytest

from mapfuse.history import Probe
from mapfuse.network import RoadNetwork, load_network

# Anchor far from poles; projection scale factors stay sane.
ORIGIN = (119.30, 24.51)


def planar_nodes_to_lonlat(coords):
    """Place planar meter coordinates on the lon/lat patch around ORIGIN."""
    lon0, lat0 = ORIGIN
    kx = 6_371_000.0 * math.cos(math.radians(lat0))
    ky = 6_371_000.0
    return [(nid, lon0 + math.degrees(x / kx), lat0 + math.degrees(y / ky))
            for nid, x, y in coords]


def build_network(node_coords, links, split_length=50.0):
    """Network from planar node coords and (id, from, to[, length[, bearing]]) rows."""
    return load_network(planar_nodes_to_lonlat(node_coords), links, split_length)


def net_xy(network: RoadNetwork, x: float, y: float) -> tuple[float, float]:
    """Map build_network's input coordinates into the network's planar frame.

    load_network anchors its projection at the node centroid, so raw test
    coordinates are translated; going through lon/lat removes the shift.
    """
    lon0, lat0 = ORIGIN
    kx = 6_371_000.0 * math.cos(math.radians(lat0))
    ky = 6_371_000.0
    lon = lon0 + math.degrees(x / kx)
    lat = lat0 + math.degrees(y / ky)
    return network.projector.to_plane(lon, lat)


def probe_at(network: RoadNetwork, x: float, y: float, t: float,
             speed: float = 5.0, bearing: float = 0.0) -> Probe:
    """Probe at build_network input coordinates."""
    lon0, lat0 = ORIGIN
    kx = 6_371_000.0 * math.cos(math.radians(lat0))
    ky = 6_371_000.0
    return Probe(t=t, speed=speed, bearing=bearing,
                 lon=lon0 + math.degrees(x / kx), lat=lat0 + math.degrees(y / ky))


@pytest.fixture
def chain_network():
    """Three collinear eastbound links of 200 m each, split at 50 m."""
    nodes = [(0, 0.0, 0.0), (1, 200.0, 0.0), (2, 400.0, 0.0), (3, 600.0, 0.0)]
    links = [(0, 0, 1, 200.0, None), (1, 1, 2, 200.0, None), (2, 2, 3, 200.0, None)]
    return build_network(nodes, links)

"""Planar geometry primitives: local projection, point-segment math, bearings.

All downstream modules work in a local equirectangular plane (meters),
anchored at the network centroid. At city scale the projection error is
far below GNSS noise, which keeps every distance Euclidean.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

EARTH_RADIUS_M = 6_371_000.0


def _check_lonlat(lon: float, lat: float) -> None:
    if not (-180.0 <= lon <= 180.0) or not (-90.0 <= lat <= 90.0):
        raise ValueError(f"coordinates out of range: lon={lon}, lat={lat}")


class PlanarProjector:
    """Equirectangular projection anchored at a fixed origin.

    x grows east, y grows north, both in meters. The inverse is exact up to
    floating point, so round trips are lossless for practical purposes.
    """

    def __init__(self, origin_lon: float, origin_lat: float):
        _check_lonlat(origin_lon, origin_lat)
        self.origin_lon = origin_lon
        self.origin_lat = origin_lat
        self._sx = EARTH_RADIUS_M * math.cos(math.radians(origin_lat))
        self._sy = EARTH_RADIUS_M
        if self._sx <= 0.0:
            raise ValueError("projection origin too close to a pole")

    def to_plane(self, lon: float, lat: float) -> tuple[float, float]:
        _check_lonlat(lon, lat)
        x = math.radians(lon - self.origin_lon) * self._sx
        y = math.radians(lat - self.origin_lat) * self._sy
        return x, y

    def to_lonlat(self, x: float, y: float) -> tuple[float, float]:
        lon = self.origin_lon + math.degrees(x / self._sx)
        lat = self.origin_lat + math.degrees(y / self._sy)
        return lon, lat


@dataclass(frozen=True)
class SegmentProjection:
    """Nearest point of a closed segment to a query point."""

    x: float
    y: float
    fraction: float   # position along the segment in [0, 1]
    distance: float   # perpendicular (Euclidean) distance to the query point


def project_to_segment(px: float, py: float,
                       x0: float, y0: float,
                       x1: float, y1: float) -> SegmentProjection:
    dx = x1 - x0
    dy = y1 - y0
    norm2 = dx * dx + dy * dy
    if norm2 == 0.0:
        # Degenerate segments are rejected at network load; treat as a point.
        return SegmentProjection(x0, y0, 0.0, math.hypot(px - x0, py - y0))
    t = ((px - x0) * dx + (py - y0) * dy) / norm2
    t = min(1.0, max(0.0, t))
    qx = x0 + t * dx
    qy = y0 + t * dy
    return SegmentProjection(qx, qy, t, math.hypot(px - qx, py - qy))


def segment_bearing(x0: float, y0: float, x1: float, y1: float) -> float:
    """Direction of a planar segment in degrees from east, in [0, 360)."""
    return math.degrees(math.atan2(y1 - y0, x1 - x0)) % 360.0


def bearing_inclination(bearing_a: float, bearing_b: float) -> float:
    """Smallest absolute angle between two bearings, in [0, 180]."""
    d = abs(bearing_a % 360.0 - bearing_b % 360.0)
    return min(d, 360.0 - d)

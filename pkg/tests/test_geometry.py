import math

import pytest
from hypothesis import given, strategies as st

from mapfuse.geometry import (PlanarProjector, bearing_inclination, project_to_segment,
                              segment_bearing)


class TestProjector:
    def test_origin_maps_to_zero(self):
        proj = PlanarProjector(119.3, 24.5)
        assert proj.to_plane(119.3, 24.5) == (0.0, 0.0)

    def test_one_millidegree_of_latitude(self):
        # arc length on a 6 371 000 m sphere
        proj = PlanarProjector(119.3, 24.5)
        _, y = proj.to_plane(119.3, 24.5 + 1e-3)
        assert y == pytest.approx(111.195, abs=1e-3)

    @given(st.floats(-10_000.0, 10_000.0), st.floats(-10_000.0, 10_000.0))
    def test_round_trip_within_city_box(self, x, y):
        proj = PlanarProjector(119.3, 24.5)
        lon, lat = proj.to_lonlat(x, y)
        x2, y2 = proj.to_plane(lon, lat)
        assert math.hypot(x2 - x, y2 - y) < 1e-6

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            PlanarProjector(200.0, 0.0)
        proj = PlanarProjector(0.0, 0.0)
        with pytest.raises(ValueError):
            proj.to_plane(0.0, 95.0)


class TestSegmentProjection:
    def test_point_on_segment(self):
        proj = project_to_segment(4.0, 0.0, 0.0, 0.0, 10.0, 0.0)
        assert proj.distance == pytest.approx(0.0)
        assert proj.fraction == pytest.approx(0.4)

    def test_clamps_past_the_end(self):
        proj = project_to_segment(15.0, 3.0, 0.0, 0.0, 10.0, 0.0)
        assert (proj.x, proj.y) == (10.0, 0.0)
        assert proj.fraction == 1.0

    def test_hand_case_3_4_5(self):
        proj = project_to_segment(3.0, 4.0, 0.0, 0.0, 10.0, 0.0)
        assert (proj.x, proj.y) == (3.0, 0.0)
        assert proj.distance == pytest.approx(4.0)
        assert proj.fraction == pytest.approx(0.3)


class TestBearings:
    def test_equal_bearings(self):
        assert bearing_inclination(10.0, 10.0) == 0.0

    def test_wraparound(self):
        assert bearing_inclination(350.0, 10.0) == pytest.approx(20.0)

    def test_opposite(self):
        assert bearing_inclination(0.0, 180.0) == 180.0

    @given(st.floats(-720.0, 720.0), st.floats(-720.0, 720.0))
    def test_range_and_symmetry(self, a, b):
        inc = bearing_inclination(a, b)
        assert 0.0 <= inc <= 180.0
        assert inc == pytest.approx(bearing_inclination(b, a), abs=1e-9)

    def test_segment_bearing_east_and_north(self):
        assert segment_bearing(0, 0, 1, 0) == 0.0
        assert segment_bearing(0, 0, 0, 1) == 90.0
        assert segment_bearing(0, 0, -1, 0) == 180.0

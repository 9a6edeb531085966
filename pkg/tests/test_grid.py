import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adhocloc.grid import (DomainError, GridSpec, RoomDims, area_bounds, area_center,
                           area_centers, locate_area, locate_areas, one_hot)

ROOM = RoomDims(5.0, 6.0, 3.0)
G15 = GridSpec(ROOM, 15, 15)


def test_resolution_and_count():
    assert G15.m_total == 225
    assert G15.r_x == pytest.approx(1 / 3)
    assert G15.r_y == pytest.approx(0.4)
    assert G15.r_x * G15.m_x == pytest.approx(ROOM.x_len, rel=1e-9)
    assert G15.r_y * G15.m_y == pytest.approx(ROOM.y_len, rel=1e-9)


@pytest.mark.parametrize("p, m", [((0.1, 0.1), 1), ((0.5, 0.5), 17), ((4.999, 5.999), 225)])
def test_locate_area_examples(p, m):
    assert locate_area(p, G15) == m


@pytest.mark.parametrize("m, expected", [
    (1, (0, 1 / 3, 0, 0.4)),
    (16, (1 / 3, 2 / 3, 0, 0.4)),
    (225, (14 / 3, 5, 5.6, 6)),
])
def test_area_bounds_examples(m, expected):
    assert area_bounds(m, G15) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("m, expected", [(1, (1 / 6, 0.2)), (17, (0.5, 0.6)), (225, (29 / 6, 5.8))])
def test_area_center_examples(m, expected):
    assert area_center(m, G15) == pytest.approx(expected, abs=1e-12)


def test_one_hot_examples():
    g = GridSpec(RoomDims(2, 2, 3), 2, 2)
    assert one_hot(1, g).tolist() == [1, 0, 0, 0]
    assert one_hot(4, g).tolist() == [0, 0, 0, 1]
    code = one_hot(3, G15)
    assert code.shape == (225,)
    assert np.flatnonzero(code).tolist() == [2]


def test_one_hot_injective():
    codes = {tuple(one_hot(m, G15)) for m in range(1, 226)}
    assert len(codes) == 225


@pytest.mark.parametrize("bad", [0, 226, -3, 2.5])
def test_index_out_of_range(bad):
    for fn in (area_bounds, area_center, one_hot):
        with pytest.raises(DomainError):
            fn(bad, G15)


@pytest.mark.parametrize("p, axis", [((-0.01, 1.0), "x"), ((1.0, 6.2), "y"), ((float("nan"), 1), "x")])
def test_out_of_room_names_coordinate(p, axis):
    with pytest.raises(DomainError, match=f"^{axis}="):
        locate_area(p, G15)


def test_far_wall_clamped_into_last_cell():
    assert locate_area((5.0, 6.0), G15) == 225
    assert locate_area((0.0, 6.0), G15) == 15


def test_bad_room_and_grid():
    with pytest.raises(DomainError):
        RoomDims(0, 1, 1)
    with pytest.raises(DomainError):
        RoomDims(1, float("inf"), 1)
    with pytest.raises(DomainError):
        GridSpec(ROOM, 0, 3)


def test_tiling_on_dense_lattice():
    g = GridSpec(RoomDims(7.0, 4.0, 3.0), 6, 5)
    xs = np.linspace(0, 7.0, 281)[:-1]
    ys = np.linspace(0, 4.0, 161)[:-1]
    pts = np.array([(x, y) for x in xs for y in ys])
    counts = np.zeros(len(pts), dtype=int)
    for m in range(1, g.m_total + 1):
        x0, x1, y0, y1 = area_bounds(m, g)
        counts += (pts[:, 0] >= x0) & (pts[:, 0] < x1) & (pts[:, 1] >= y0) & (pts[:, 1] < y1)
    assert (counts == 1).all()


def test_vectorized_matches_scalar():
    rng = np.random.default_rng(3)
    pts = rng.uniform([0, 0], [5, 6], size=(500, 2))
    assert locate_areas(pts, G15).tolist() == [locate_area(p, G15) for p in pts]
    assert area_centers(G15)[16] == pytest.approx(area_center(17, G15))


rooms = st.builds(RoomDims, st.floats(0.5, 20), st.floats(0.5, 20), st.floats(2, 5))


@settings(max_examples=200, deadline=None)
@given(rooms, st.integers(1, 30), st.integers(1, 30), st.floats(0, 1), st.floats(0, 1))
def test_round_trip_and_reconstruction_bound(room, mx, my, u, v):
    g = GridSpec(room, mx, my)
    p = (min(u * room.x_len, room.x_len), min(v * room.y_len, room.y_len))
    m = locate_area(p, g)
    x0, x1, y0, y1 = area_bounds(m, g)
    # half-open cells, except that the far walls belong to the last cells
    assert x0 <= p[0] and (p[0] < x1 or p[0] == room.x_len)
    assert y0 <= p[1] and (p[1] < y1 or p[1] == room.y_len)
    c = area_center(m, g)
    assert math.dist(p, c) <= g.max_center_error * (1 + 1e-12)

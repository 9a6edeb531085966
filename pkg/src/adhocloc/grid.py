"""Room partition into local areas.

Areas are numbered 1..M column-major along y: area ``m`` sits in column
``(m - 1) // m_y`` (x axis) and row ``(m - 1) % m_y`` (y axis). Cells are
half-open ``[start, end)`` on both axes; points on the far walls are clamped
into the last cell.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class RoomDims:
    x_len: float
    y_len: float
    z_len: float

    def __post_init__(self):
        for name in ("x_len", "y_len", "z_len"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise DomainError(f"room {name} must be positive and finite, got {v!r}")

    @property
    def volume(self) -> float:
        return self.x_len * self.y_len * self.z_len

    @property
    def surface(self) -> float:
        x, y, z = self.x_len, self.y_len, self.z_len
        return 2.0 * (x * y + x * z + y * z)

    def as_tuple(self):
        return (self.x_len, self.y_len, self.z_len)

    def to_dict(self) -> dict:
        return {"x_len": self.x_len, "y_len": self.y_len, "z_len": self.z_len}


@dataclass(frozen=True)
class GridSpec:
    room: RoomDims
    m_x: int
    m_y: int

    def __post_init__(self):
        if int(self.m_x) != self.m_x or int(self.m_y) != self.m_y or self.m_x < 1 or self.m_y < 1:
            raise DomainError(f"grid counts must be positive integers, got {self.m_x}x{self.m_y}")

    @property
    def r_x(self) -> float:
        return self.room.x_len / self.m_x

    @property
    def r_y(self) -> float:
        return self.room.y_len / self.m_y

    @property
    def m_total(self) -> int:
        return self.m_x * self.m_y

    @property
    def max_center_error(self) -> float:
        """Largest possible distance from an in-room point to its cell center."""
        return 0.5 * math.hypot(self.r_x, self.r_y)

    def to_dict(self) -> dict:
        return {**self.room.to_dict(), "m_x": self.m_x, "m_y": self.m_y}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(RoomDims(float(d["x_len"]), float(d["y_len"]), float(d["z_len"])),
                   int(d["m_x"]), int(d["m_y"]))


def _check_index(m, g: GridSpec) -> int:
    if isinstance(m, (bool, np.bool_)) or int(m) != m:
        raise DomainError(f"area index must be an integer, got {m!r}")
    m = int(m)
    if not 1 <= m <= g.m_total:
        raise DomainError(f"area index {m} outside 1..{g.m_total}")
    return m


def _cell(coord: float, length: float, count: int, name: str) -> int:
    if not math.isfinite(coord) or coord < 0.0 or coord > length:
        raise DomainError(f"{name}={coord!r} lies outside the room [0, {length}]")
    i = min(int(coord * count / length), count - 1)
    # nudge against rounding so the cell really contains coord
    step = length / count
    if i > 0 and coord < i * step:
        i -= 1
    elif i < count - 1 and coord >= (i + 1) * step:
        i += 1
    return i


def locate_area(p, g: GridSpec) -> int:
    """Return the 1-based index of the area containing the 2D point ``p``."""
    col = _cell(float(p[0]), g.room.x_len, g.m_x, "x")
    row = _cell(float(p[1]), g.room.y_len, g.m_y, "y")
    return col * g.m_y + row + 1


def locate_areas(points, g: GridSpec) -> np.ndarray:
    """Vectorized :func:`locate_area` for an ``(K, 2+)`` array of points."""
    pts = np.asarray(points, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    bad_x = ~np.isfinite(x) | (x < 0) | (x > g.room.x_len)
    bad_y = ~np.isfinite(y) | (y < 0) | (y > g.room.y_len)
    if bad_x.any():
        raise DomainError(f"x={x[bad_x][0]!r} lies outside the room [0, {g.room.x_len}]")
    if bad_y.any():
        raise DomainError(f"y={y[bad_y][0]!r} lies outside the room [0, {g.room.y_len}]")

    def cells(c, length, count):
        step = length / count
        i = np.minimum((c * count / length).astype(np.int64), count - 1)
        i = np.where((i > 0) & (c < i * step), i - 1, i)
        i = np.where((i < count - 1) & (c >= (i + 1) * step), i + 1, i)
        return i

    return cells(x, g.room.x_len, g.m_x) * g.m_y + cells(y, g.room.y_len, g.m_y) + 1


def area_bounds(m: int, g: GridSpec) -> tuple[float, float, float, float]:
    m = _check_index(m, g)
    col, row = divmod(m - 1, g.m_y)
    x_start = col * g.r_x
    y_start = row * g.r_y
    return x_start, x_start + g.r_x, y_start, y_start + g.r_y


def area_center(m: int, g: GridSpec) -> tuple[float, float]:
    m = _check_index(m, g)
    col, row = divmod(m - 1, g.m_y)
    return (col + 0.5) * g.r_x, (row + 0.5) * g.r_y


def area_centers(g: GridSpec) -> np.ndarray:
    """Centers of all areas as an ``(M, 2)`` array, row ``m - 1`` for area ``m``."""
    idx = np.arange(g.m_total)
    col, row = np.divmod(idx, g.m_y)
    return np.stack([(col + 0.5) * g.r_x, (row + 0.5) * g.r_y], axis=1)


def one_hot(m: int, g: GridSpec, dtype=np.float32) -> np.ndarray:
    """One-hot code of area ``m``; element ``m - 1`` of the vector is set."""
    m = _check_index(m, g)
    code = np.zeros(g.m_total, dtype=dtype)
    code[m - 1] = 1
    return code

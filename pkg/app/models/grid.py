from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np

from app.exceptions import IndivisibleIntervalError


@dataclass(frozen=True)
class Grid:
    """Uniform partition of [lo, hi) into n = 2^m cells."""

    lo: float
    hi: float
    m: int

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"grid depth m must be >= 1, got {self.m}")
        if not self.hi > self.lo:
            raise ValueError(f"grid needs hi > lo, got [{self.lo}, {self.hi})")

    @property
    def n(self) -> int:
        return 2 ** self.m

    @property
    def length(self) -> float:
        return self.hi - self.lo

    @property
    def cell_width(self) -> float:
        return (self.hi - self.lo) / self.n

    @cached_property
    def edges(self) -> np.ndarray:
        return self.lo + self.cell_width * np.arange(self.n + 1)

    @cached_property
    def midpoints(self) -> np.ndarray:
        return self.lo + self.cell_width * (np.arange(self.n) + 0.5)

    def position(self, cell: float) -> float:
        """Real coordinate of a (possibly fractional) cell edge index."""
        return self.lo + self.cell_width * cell

    def cell_index(self, x: float) -> float:
        return (x - self.lo) / self.cell_width

    def cell_of(self, x: float) -> int:
        i = int(np.floor(self.cell_index(x)))
        return min(max(i, 0), self.n - 1)

    def span(self, a: float, b: float) -> tuple[int, int]:
        """Cell range [start, stop) of the real interval [a, b) snapped to edges."""
        start = int(round(self.cell_index(a)))
        stop = int(round(self.cell_index(b)))
        start, stop = max(start, 0), min(stop, self.n)
        if stop < start:
            raise ValueError(f"empty span for [{a}, {b})")
        return start, stop

    def refined(self, m: int) -> Grid:
        return Grid(self.lo, self.hi, m)


@dataclass(frozen=True, order=True)
class DyadicInterval:
    """Cells [shift + index*2^level, shift + (index+1)*2^level)."""

    level: int
    index: int
    shift: int = 0

    @property
    def size(self) -> int:
        return 2 ** self.level

    @property
    def start(self) -> int:
        return self.shift + self.index * self.size

    @property
    def stop(self) -> int:
        return self.start + self.size

    @property
    def cells(self) -> slice:
        return slice(self.start, self.stop)

    def span(self) -> tuple[int, int]:
        return self.start, self.stop

    def bounds(self, grid: Grid) -> tuple[float, float]:
        return grid.position(self.start), grid.position(self.stop)

    def length(self, grid: Grid) -> float:
        return self.size * grid.cell_width

    def center(self, grid: Grid) -> float:
        return grid.position(self.start + self.size / 2)

    def omega(self, grid: Grid) -> float:
        return self.shift / grid.n

    def halves(self) -> tuple[DyadicInterval, DyadicInterval]:
        if self.level == 0:
            raise IndivisibleIntervalError(f"{self} is a single cell and has no halves")
        return (
            DyadicInterval(self.level - 1, 2 * self.index, self.shift),
            DyadicInterval(self.level - 1, 2 * self.index + 1, self.shift),
        )

    def parent(self) -> DyadicInterval:
        return DyadicInterval(self.level + 1, self.index // 2, self.shift)

    def contains(self, other: DyadicInterval) -> bool:
        return self.start <= other.start and other.stop <= self.stop

    def overlaps(self, other: DyadicInterval) -> bool:
        return self.start < other.stop and other.start < self.stop

    def is_below(self, other: DyadicInterval) -> bool:
        return self.stop <= other.start

    def within(self, start: int, stop: int) -> bool:
        return start <= self.start and self.stop <= stop


@dataclass(frozen=True)
class Lattice:
    """Dyadic lattice of the grid translated by `shift` cells."""

    grid: Grid
    shift: int = 0

    @classmethod
    def from_omega(cls, grid: Grid, omega: float) -> Lattice:
        if abs(omega) > 0.25:
            raise ValueError(f"lattice shift must lie in [-1/4, 1/4], got {omega}")
        return cls(grid, int(round(omega * grid.n)))

    @property
    def omega(self) -> float:
        return self.shift / self.grid.n

    def starts(self, level: int, lo: int = 0, hi: int | None = None) -> np.ndarray:
        """Start cells of the level-`level` intervals contained in [lo, hi)."""
        hi = self.grid.n if hi is None else hi
        size = 2 ** level
        first = lo + (self.shift - lo) % size
        return np.arange(first, hi - size + 1, size, dtype=np.int64)

    def interval_at(self, level: int, start: int) -> DyadicInterval:
        size = 2 ** level
        if (start - self.shift) % size:
            raise ValueError(f"cell {start} is not a level-{level} lattice point")
        return DyadicInterval(level, (start - self.shift) // size, self.shift)

    def intervals(self, level: int, lo: int = 0, hi: int | None = None) -> list[DyadicInterval]:
        return [self.interval_at(level, int(s)) for s in self.starts(level, lo, hi)]

    def all_intervals(self, lo: int = 0, hi: int | None = None, min_level: int = 0) -> list[DyadicInterval]:
        """All lattice intervals inside [lo, hi), coarsest first."""
        out = []
        for level in range(self.grid.m, min_level - 1, -1):
            out.extend(self.intervals(level, lo, hi))
        return out

    def boundary_points(self, level: int) -> np.ndarray:
        """Lattice points of the given level lying in the closed ambient range [0, n]."""
        size = 2 ** level
        first = self.shift % size
        return np.arange(first, self.grid.n + 1, size, dtype=np.int64)

    def root(self) -> DyadicInterval:
        """Largest lattice interval inside the grid covering the middle cell."""
        middle = self.grid.n // 2
        for level in range(self.grid.m, -1, -1):
            for start in self.starts(level):
                if start <= middle < start + 2 ** level:
                    return self.interval_at(level, int(start))
        raise ValueError("lattice has no interval inside the grid")


class RegionTag(str, Enum):
    JltI = "JltI"
    IltJ = "IltJ"
    Diagonal = "Diagonal"
    I1 = "I1"
    I2 = "I2"
    I3 = "I3"
    I4 = "I4"
    I5 = "I5"
    I6 = "I6"
    # smaller interval bad in an I3-I6 configuration; such pairs are discarded
    Bad = "Bad"

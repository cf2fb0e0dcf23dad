from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from app.exceptions import WeightError
from app.models.grid import Grid


@dataclass(frozen=True, eq=False)
class Weight:
    """Upward weight: positive on the cells of ℍ = (-inf, cutoff), zero above.

    A cell belongs to ℍ when its midpoint lies strictly below the cutoff, so ℍ is
    always a prefix of cells. `cutoff=None` means ℍ is the whole grid.
    """

    grid: Grid
    values: np.ndarray
    cutoff: float | None = None
    support_cells: int = field(init=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.grid.n,):
            raise WeightError(f"weight needs {self.grid.n} cell values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise WeightError("weight values must be finite")
        if self.cutoff is None:
            h = self.grid.n
        else:
            h = int(np.count_nonzero(self.grid.midpoints < self.cutoff))
        if h == 0:
            raise WeightError(f"cutoff {self.cutoff} leaves no cell in the support")
        if np.any(values[:h] <= 0):
            bad = int(np.argmax(values[:h] <= 0))
            raise WeightError(f"weight vanishes inside its support at cell {bad}")
        if np.any(values[h:] != 0):
            raise WeightError(f"weight must vanish above the cutoff {self.cutoff}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "support_cells", h)

    @classmethod
    def constant(cls, grid: Grid, c: float = 1.0) -> Weight:
        return cls(grid, np.full(grid.n, float(c)))

    @classmethod
    def from_prefix(cls, grid: Grid, values: np.ndarray) -> Weight:
        """Weight whose support is the prefix of cells up to the last positive value."""
        values = np.asarray(values, dtype=float)
        positive = np.flatnonzero(values > 0)
        if positive.size == 0:
            raise WeightError("no positive cell to support a weight")
        h = int(positive[-1]) + 1
        cut = None if h == grid.n else float(grid.edges[h])
        clipped = values.copy()
        clipped[h:] = 0.0
        return cls(grid, clipped, cut)

    @property
    def support(self) -> np.ndarray:
        mask = np.zeros(self.grid.n, dtype=bool)
        mask[: self.support_cells] = True
        return mask

    @property
    def positive(self) -> np.ndarray:
        """Values restricted to ℍ."""
        return self.values[: self.support_cells]

    def inverse(self) -> Weight:
        inv = np.zeros(self.grid.n)
        inv[: self.support_cells] = 1.0 / self.positive
        return Weight(self.grid, inv, self.cutoff)

    def power(self, q: float) -> np.ndarray:
        """w^q on ℍ, zero above (also for negative q)."""
        out = np.zeros(self.grid.n)
        out[: self.support_cells] = self.positive ** q
        return out

    def scaled(self, c: float) -> Weight:
        if c <= 0:
            raise WeightError(f"scale factor must be positive, got {c}")
        return Weight(self.grid, self.values * c, self.cutoff)

    def multiplied(self, f: np.ndarray) -> Weight:
        f = np.asarray(f, dtype=float)
        if np.any(f[: self.support_cells] <= 0):
            raise WeightError("multiplier must be positive on the support")
        out = np.zeros(self.grid.n)
        out[: self.support_cells] = self.positive * f[: self.support_cells]
        return Weight(self.grid, out, self.cutoff)

    def mass(self, start: int = 0, stop: int | None = None) -> float:
        return float(self.values[start:stop].sum() * self.grid.cell_width)

    def measures(self) -> MeasurePair:
        return MeasurePair(
            self.grid,
            self.inverse().values * self.grid.cell_width,
            self.values * self.grid.cell_width,
            self.support_cells,
        )


@dataclass(frozen=True, eq=False)
class MeasurePair:
    """Cell masses of μ = χ_ℍ w⁻¹dx and ν = χ_ℍ w dx."""

    grid: Grid
    mu: np.ndarray
    nu: np.ndarray
    support_cells: int

    def __post_init__(self):
        for name in ("mu", "nu"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (self.grid.n,):
                raise WeightError(f"{name} needs {self.grid.n} cell masses, got shape {arr.shape}")
            if np.any(arr < 0):
                raise WeightError(f"{name} must be nonnegative")
            object.__setattr__(self, name, arr)

    def swapped(self) -> MeasurePair:
        """The pair of w⁻¹: μ and ν exchange roles."""
        return MeasurePair(self.grid, self.nu, self.mu, self.support_cells)

    def product_defect(self) -> float:
        """max over ℍ of |μ_j ν_j − cell_width²| relative to cell_width²."""
        h = self.support_cells
        cw2 = self.grid.cell_width ** 2
        return float(np.max(np.abs(self.mu[:h] * self.nu[:h] - cw2)) / cw2)

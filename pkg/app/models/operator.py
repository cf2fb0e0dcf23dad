from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from app.models.grid import Grid
from app.models.weight import Weight

Direction = Literal["up", "down"]
KernelFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CausalKernel:
    """K(x, y) with size constant C_size and smoothness exponent eps.

    `up` kernels vanish when x < y (output below input), `down` kernels when x > y.
    """

    func: KernelFunction
    C_size: float = 1.0
    eps: float = 1.0
    direction: Direction = "up"
    name: str = "kernel"

    def __call__(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return np.asarray(self.func(x, y), dtype=float) * np.ones(np.broadcast(x, y).shape)

    def transposed(self) -> CausalKernel:
        func = self.func
        return CausalKernel(
            lambda x, y: func(y, x),
            self.C_size,
            self.eps,
            "down" if self.direction == "up" else "up",
            f"{self.name}'",
        )


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    """Dense discretization T_ij = K(x_i, y_j)·cell_width for |i−j| ≥ band."""

    entries: np.ndarray
    grid: Grid
    band: int = 1
    flavor: Literal["plain", "mu_weighted"] = "plain"
    direction: Direction = "up"

    def __post_init__(self):
        n = self.grid.n
        if self.entries.shape != (n, n):
            raise ValueError(f"operator matrix must be {n}x{n}, got {self.entries.shape}")
        if self.band < 1:
            raise ValueError(f"band must be >= 1, got {self.band}")

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def kernel_matrix(self) -> np.ndarray:
        """K(x_i, y_j) without the cell-width factor."""
        return self.entries / self.grid.cell_width

    def apply(self, f: np.ndarray) -> np.ndarray:
        return self.entries @ np.asarray(f, dtype=float)

    def transpose(self) -> OperatorMatrix:
        return OperatorMatrix(
            self.entries.T.copy(),
            self.grid,
            self.band,
            self.flavor,
            "down" if self.direction == "up" else "up",
        )

    def mu_weighted(self, w: Weight) -> OperatorMatrix:
        """T_μ = T(χ_ℍ w⁻¹ ·), i.e. plain · diag(μ)/cell_width."""
        if self.flavor != "plain":
            raise ValueError("operator is already mu-weighted")
        return OperatorMatrix(
            self.entries * w.inverse().values[None, :],
            self.grid,
            self.band,
            "mu_weighted",
            self.direction,
        )

    def is_causal(self) -> bool:
        # up: nothing above the diagonal (x_i < y_j); down: nothing below it
        if self.direction == "up":
            return not np.any(np.triu(self.entries, k=1))
        return not np.any(np.tril(self.entries, k=-1))
